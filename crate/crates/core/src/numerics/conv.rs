use super::Tensor;
use crate::error::{shape_err, Result};

/// Depthwise causal convolution over `[B×L×C]` inputs.
///
/// `kernel` is `[W×C]`; tap `W−1` multiplies the current step and tap 0
/// the step `W−1` positions back. Steps before the start read as zero.
pub fn causal_conv1d_batched(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let [w, kc] = kernel.dims2("causal_conv1d")?;
    if s.len() != 3 || s[2] != kc || bias.len() != kc || w == 0 {
        return shape_err(
            "causal_conv1d",
            format!("x {s:?}, kernel {:?}, bias {:?}", kernel.shape(), bias.shape()),
        );
    }
    let (b, l, c) = (s[0], s[1], s[2]);
    let (xv, kv) = (x.data(), kernel.data());
    let mut out = vec![0.0; b * l * c];
    for bi in 0..b {
        for t in 0..l {
            let o = (bi * l + t) * c;
            out[o..o + c].copy_from_slice(bias.data());
            for tap in 0..w {
                let Some(src) = (t + tap + 1).checked_sub(w) else { continue };
                let xo = (bi * l + src) * c;
                for ch in 0..c {
                    out[o + ch] += kv[tap * c + ch] * xv[xo + ch];
                }
            }
        }
    }
    Tensor::new(vec![b, l, c], out)
}
