use std::collections::HashMap;

use crate::nn::{ChannelPlan, LayerKind, Model, NamedTensors, ParamKind};

use super::CompressionError;

/// Channels kept out of `c` at width factor `gamma`: `max(1, round(γ·c))`,
/// rounding half to even.
pub fn kept_channels(c: usize, gamma: f64) -> usize {
    ((gamma * c as f64).round_ties_even() as usize).clamp(1, c)
}

/// Walks the layer graph and assigns each linear/conv layer its active
/// `(in, out)` widths. The first layer's input and the last layer's output
/// are never pruned; every other boundary keeps a channel prefix.
pub fn channel_plan(model: &Model, gamma: f64) -> Result<ChannelPlan, CompressionError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(CompressionError::Level(format!("width factor {gamma} outside (0, 1]")));
    }
    let mut widths = vec![None; model.descriptors().len()];
    let mut carried: Option<usize> = None;
    for (i, d) in model.weighted_layers() {
        let kin = if d.is_first_layer {
            d.in_channels
        } else {
            carried.unwrap_or(d.in_channels)
        };
        let kout = if d.is_last_layer {
            d.out_channels
        } else {
            kept_channels(d.out_channels, gamma)
        };
        widths[i] = Some((kin, kout));
        carried = Some(kout);
    }
    Ok(ChannelPlan { widths })
}

/// Active channel count of every channel-carrying layer under `plan`, keyed by
/// layer name. Norm layers inherit the output width of the layer feeding them.
pub fn active_channels(model: &Model, plan: &ChannelPlan) -> HashMap<String, (usize, usize)> {
    let mut out = HashMap::new();
    let mut current = 0;
    for (d, w) in model.descriptors().iter().zip(&plan.widths) {
        match (d.kind, w) {
            (LayerKind::Linear | LayerKind::Conv, Some((kin, kout))) => {
                current = *kout;
                out.insert(d.name.clone(), (*kin, *kout));
            }
            _ => {
                out.insert(d.name.clone(), (current, current));
            }
        }
    }
    out
}

/// Zeroes every pruned channel in full-shape copies of `weights`. Running the
/// full-width network on the result is equivalent to running the sliced
/// network described by `plan` when normalization is per channel.
pub fn mask_structured(
    model: &Model,
    weights: &NamedTensors,
    plan: &ChannelPlan,
) -> Result<NamedTensors, CompressionError> {
    let active = active_channels(model, plan);
    let specs = model.param_specs();
    let mut out = weights.clone();
    for spec in specs {
        let t = out
            .get_mut(&spec.name)
            .ok_or_else(|| CompressionError::MissingWeight(spec.name.clone()))?;
        let &(kin, kout) = active
            .get(&spec.layer)
            .ok_or_else(|| CompressionError::MissingWeight(spec.layer.clone()))?;
        let shape = t.shape().to_vec();
        let data = t.data_mut();
        match (spec.kind, shape.as_slice()) {
            (ParamKind::Weight, &[din, dout]) => {
                for i in 0..din {
                    for j in 0..dout {
                        if i >= kin || j >= kout {
                            data[i * dout + j] = 0.0;
                        }
                    }
                }
            }
            (ParamKind::Weight, &[dout, din, kh, kw]) => {
                let inner = kh * kw;
                for o in 0..dout {
                    for i in 0..din {
                        if o >= kout || i >= kin {
                            data[(o * din + i) * inner..(o * din + i + 1) * inner].fill(0.0);
                        }
                    }
                }
            }
            (_, &[c]) => data[kout.min(c)..].fill(0.0),
            _ => {
                return Err(CompressionError::Level(format!(
                    "unexpected shape {shape:?} for {}",
                    spec.name
                )))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_rule() {
        assert_eq!(kept_channels(64, 0.25), 16);
        assert_eq!(kept_channels(64, 1.0), 64);
        assert_eq!(kept_channels(16, 0.01), 1);
        // 0.625 * 4 = 2.5 rounds to even
        assert_eq!(kept_channels(4, 0.625), 2);
    }
}
