use crate::tensor::{invalid, Result, Scalar, Tensor};

/// Per-tensor affine quantization parameters: `x ≈ scale * (q - zero_point)`
/// with integer `q ∈ [0, 2^bits - 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams {
    pub bits: u32,
    pub scale: f64,
    pub zero_point: i64,
}

impl QuantParams {
    pub fn qmax(&self) -> i64 {
        (1i64 << self.bits) - 1
    }
}

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;

struct Quantizer {
    params: QuantParams,
    /// Set for a constant tensor, which is reproduced exactly.
    constant: bool,
    /// `levels / (max - min)`; multiplying by the reciprocal of the range is
    /// exact for power-of-two ranges where `x / s` would not be.
    inv_scale: f64,
}

impl Quantizer {
    fn fit(values: impl Iterator<Item = f64>, bits: u32) -> Result<Self> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(invalid(
                "quantize_affine",
                format!("bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]"),
            ));
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut any = false;
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
            any = true;
        }
        if !any {
            return Err(invalid("quantize_affine", "empty tensor"));
        }
        let constant = hi == lo;
        if !constant {
            // the representable range always contains zero, so a one-signed
            // tensor is not pushed entirely onto the clamp boundary
            lo = lo.min(0.0);
            hi = hi.max(0.0);
        }
        let levels = ((1i64 << bits) - 1) as f64;
        let range = hi - lo;
        let (scale, inv_scale) = if !constant {
            (range / levels, levels / range)
        } else {
            (1.0, 1.0)
        };
        let zero_point = (-lo * inv_scale).round_ties_even().clamp(0.0, levels) as i64;
        Ok(Self {
            params: QuantParams {
                bits,
                scale,
                zero_point,
            },
            inv_scale,
            constant,
        })
    }

    fn apply(&self, x: f64) -> f64 {
        if self.constant {
            return x;
        }
        let qmax = self.params.qmax() as f64;
        let z = self.params.zero_point as f64;
        let q = ((x * self.inv_scale).round_ties_even() + z).clamp(0.0, qmax);
        self.params.scale * (q - z)
    }
}

/// Quantizes and dequantizes `t` with a single scale and zero point taken
/// from its min/max, widened to include zero. Rounds half to even. A constant tensor has no range to
/// quantize and is returned unchanged.
pub fn quantize_affine(t: &Tensor, bits: u32) -> Result<(QuantParams, Tensor)> {
    let qz = Quantizer::fit(t.data().iter().map(|&v| f64::from(v)), bits)?;
    let out = t.map(|v| qz.apply(f64::from(v)) as f32);
    Ok((qz.params, out))
}

/// [`quantize_affine`] for any scalar type, returning only the dequantized
/// values.
pub fn fake_quantize<T: Scalar>(t: &Tensor<T>, bits: u32) -> Result<Tensor<T>> {
    let qz = Quantizer::fit(t.data().iter().map(|v| v.as_f64()), bits)?;
    Ok(t.map(|v| T::of(qz.apply(v.as_f64()))))
}
