//! Binary model files.
//!
//! Layout (little-endian): magic `FSAM1`, `u32` layer count `L`, `L + 1`
//! `u32` layer sizes (input first), then for each layer its `out × in`
//! weights row-major as `f64` followed by its `out` biases.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::dnn::network::{Layer, Network};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 5] = b"FSAM1";

pub fn encode_model(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for size in net.layer_sizes() {
        out.extend_from_slice(&(size as u32).to_le_bytes());
    }
    for layer in net.layers() {
        for w in layer.weights.iter() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for b in layer.bias.iter() {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Binary {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                msg: format!("expected {n} bytes of {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_model(path: &Path, bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(5, "magic")? != MODEL_MAGIC {
        return Err(Error::Binary {
            path: path.to_path_buf(),
            offset: 0,
            msg: "bad magic, expected FSAM1".into(),
        });
    }
    let count = r.u32("layer count")? as usize;
    if count == 0 {
        return Err(Error::Binary {
            path: path.to_path_buf(),
            offset: 5,
            msg: "zero layers".into(),
        });
    }
    let sizes = (0..=count)
        .map(|_| r.u32("layer size").map(|s| s as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(count);
    for w in sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weights = (0..fan_in * fan_out)
            .map(|_| r.f64("weights"))
            .collect::<Result<Vec<_>>>()?;
        let bias = (0..fan_out).map(|_| r.f64("bias")).collect::<Result<Vec<_>>>()?;
        layers.push(Layer {
            weights: Array2::from_shape_vec((fan_out, fan_in), weights)
                .expect("length checked by construction"),
            bias: Array1::from(bias),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Binary {
            path: path.to_path_buf(),
            offset: r.pos as u64,
            msg: "trailing bytes after model".into(),
        });
    }
    Network::from_layers(layers, 0)
}

pub fn save_model(path: &Path, net: &Network) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_model(net)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Network> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_model(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dnn::network::init_network;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let net = init_network(&[2, 3, 4], 5).unwrap();
        let bytes = encode_model(&net);
        assert_eq!(&bytes[..5], b"FSAM1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 4);
        let first_weight = f64::from_le_bytes(bytes[21..29].try_into().unwrap());
        assert_eq!(first_weight, net.layers()[0].weights[[0, 0]]);
        assert_eq!(bytes.len(), 5 + 4 + 12 + 8 * (6 + 3 + 12 + 4));
    }

    #[test]
    fn truncation_reports_offset() {
        let net = init_network(&[2, 3, 4], 5).unwrap();
        let bytes = encode_model(&net);
        let err = decode_model(Path::new("m.bin"), &bytes[..30]).unwrap_err();
        assert!(matches!(err, Error::Binary { offset: 29, .. }), "{err}");
        assert!(decode_model(Path::new("m.bin"), b"FSAMX").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), hidden in 1usize..6, out in 1usize..5) {
            let net = init_network(&[3, hidden, out], seed).unwrap();
            let back = decode_model(Path::new("m"), &encode_model(&net)).unwrap();
            prop_assert_eq!(encode_model(&back), encode_model(&net));
        }
    }
}
