use crate::error::{NetError, Result};

/// Transformer-style positional encoding with interleaved `sin`/`cos` pairs:
/// `[sin(v·f₀), cos(v·f₀), sin(v·f₁), …]` with `fᵢ = max_period^(−i / (dim/2))`.
pub fn sinusoidal_embed(value: i64, dim: usize, max_period: f64) -> Result<Vec<f32>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(NetError::invalid("sinusoidal_embed", format!("dim must be even and at least 2, got {dim}")));
    }
    if !(max_period.is_finite() && max_period > 0.0) {
        return Err(NetError::invalid("sinusoidal_embed", "max_period must be positive"));
    }
    let half = dim / 2;
    let v = value as f64;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let f = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out.push((v * f).sin() as f32);
        out.push((v * f).cos() as f32);
    }
    Ok(out)
}
