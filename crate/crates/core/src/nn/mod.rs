//! Minimal differentiable network stack: MLP with layer norm and exact GELU,
//! reverse-mode gradients, Adam, and Polyak target updates.

mod adam;
mod mlp;

pub use adam::{AdamHyper, AdamState, AdamVec};
pub use mlp::{gelu, gelu_grad, norm_cdf, Cache, Gradients, Layer, LayerGrads, LayerKind, Mlp};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

/// Serializes architecture header (layer sizes, kind tags) followed by the
/// parameter arrays in layer order. Raw f64 bits, so save -> load -> save is
/// byte-identical.
pub fn write_mlp(w: &mut ByteWriter, mlp: &Mlp) {
    w.put_u64(mlp.layers().len() as u64);
    for layer in mlp.layers() {
        w.put_u64(layer.in_dim as u64);
        w.put_u64(layer.out_dim as u64);
        w.put_u8(match layer.kind {
            LayerKind::Hidden => 0,
            LayerKind::Output => 1,
        });
    }
    for layer in mlp.layers() {
        w.put_f64_slice(&layer.w);
        w.put_f64_slice(&layer.b);
        w.put_f64_slice(&layer.ln_gain);
        w.put_f64_slice(&layer.ln_offset);
    }
}

pub fn read_mlp(r: &mut ByteReader) -> Result<Mlp> {
    let n_layers = r.get_len("layer count")?;
    if n_layers == 0 {
        return Err(Error::format("mlp with zero layers"));
    }
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_dim = r.get_len("in_dim")?;
        let out_dim = r.get_len("out_dim")?;
        let kind = match r.get_u8()? {
            0 => LayerKind::Hidden,
            1 => LayerKind::Output,
            k => return Err(Error::format(format!("unknown layer kind tag {k}"))),
        };
        shapes.push((in_dim, out_dim, kind));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (in_dim, out_dim, kind) in shapes {
        let w = r.get_f64_vec()?;
        let b = r.get_f64_vec()?;
        let ln_gain = r.get_f64_vec()?;
        let ln_offset = r.get_f64_vec()?;
        if w.len() != in_dim * out_dim || b.len() != out_dim {
            return Err(Error::format("mlp parameter array does not match header"));
        }
        let expected_ln = match kind {
            LayerKind::Hidden => out_dim,
            LayerKind::Output => 0,
        };
        if ln_gain.len() != expected_ln || ln_offset.len() != expected_ln {
            return Err(Error::format("layer norm arrays do not match header"));
        }
        layers.push(Layer {
            in_dim,
            out_dim,
            kind,
            w,
            b,
            ln_gain,
            ln_offset,
        });
    }
    // Consecutive dims must chain.
    for pair in layers.windows(2) {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::format("layer dimensions do not chain"));
        }
    }
    Ok(Mlp::from_layers(layers))
}
