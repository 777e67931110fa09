//! Binary parameter checkpoint.
//!
//! Little-endian layout:
//!
//! ```text
//! magic        4 bytes  b"XDFN"
//! version      u32      1
//! layer_count  u32
//! per layer:
//!   fan_in      u64
//!   fan_out     u64
//!   activation  u32     0 identity, 1 tanh, 2 silu, 3 softplus
//!   weights     f64 x fan_out*fan_in, row-major (one row per output unit)
//!   biases      f64 x fan_out
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::net::{Activation, FeedForwardNet, Layer};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"XDFN";
pub const VERSION: u32 = 1;

pub fn write_net<W: Write>(net: &FeedForwardNet, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(net.layers().len() as u32).to_le_bytes())?;
    for l in net.layers() {
        w.write_all(&(l.fan_in() as u64).to_le_bytes())?;
        w.write_all(&(l.fan_out() as u64).to_le_bytes())?;
        w.write_all(&l.activation.tag().to_le_bytes())?;
        for v in l.weights.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in l.bias.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

fn read_f64s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f64>> {
    (0..n)
        .map(|_| read_array::<8, _>(r, what).map(f64::from_le_bytes))
        .collect()
}

pub fn read_net<R: Read>(mut r: R) -> Result<FeedForwardNet> {
    let magic = read_array::<4, _>(&mut r, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_array::<4, _>(&mut r, "version")?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array::<4, _>(&mut r, "layer count")?) as usize;
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let fan_in = u64::from_le_bytes(read_array::<8, _>(&mut r, "fan_in")?) as usize;
        let fan_out = u64::from_le_bytes(read_array::<8, _>(&mut r, "fan_out")?) as usize;
        let tag = u32::from_le_bytes(read_array::<4, _>(&mut r, "activation")?);
        let activation = Activation::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("layer {i}: unknown activation tag {tag}")))?;
        let weights = read_f64s(&mut r, fan_in * fan_out, "weights")?;
        let bias = read_f64s(&mut r, fan_out, "biases")?;
        layers.push(Layer {
            weights: Array2::from_shape_vec((fan_out, fan_in), weights)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
            bias: Array1::from_vec(bias),
            activation,
        });
    }
    FeedForwardNet::from_layers(layers)
}

pub fn save_net(net: &FeedForwardNet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_net(net, &mut buf).expect("writing to a Vec cannot fail");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_net(path: &Path) -> Result<FeedForwardNet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_net(&bytes[..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::SeededRng;

    #[test]
    fn header_layout() {
        let mut rng = SeededRng::new(1);
        let net = FeedForwardNet::mlp(2, &[3], 1, Activation::Tanh, &mut rng);
        let mut buf = Vec::new();
        write_net(&net, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"XDFN");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[20..28].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[28..32].try_into().unwrap()), 1);
        let expected_len = 12 + (20 + 8 * (2 * 3 + 3)) + (20 + 8 * (3 + 1));
        assert_eq!(buf.len(), expected_len);
    }

    #[test]
    fn round_trip_is_exact() {
        let mut rng = SeededRng::new(9);
        let net = FeedForwardNet::mlp(5, &[7, 4], 3, Activation::Silu, &mut rng);
        let mut buf = Vec::new();
        write_net(&net, &mut buf).unwrap();
        assert_eq!(read_net(&buf[..]).unwrap(), net);
    }

    #[test]
    fn truncated_file_errors() {
        let mut rng = SeededRng::new(9);
        let net = FeedForwardNet::mlp(5, &[7], 3, Activation::Silu, &mut rng);
        let mut buf = Vec::new();
        write_net(&net, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_net(&buf[..]), Err(Error::Checkpoint(_))));
    }
}
