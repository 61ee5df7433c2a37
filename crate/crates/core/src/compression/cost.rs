use crate::nn::{Model, ParamKind};
use crate::subspace::SubspaceKind;

use super::{channel_plan, topk_zero_count, CompressionError, Level};

/// Per-sample cost of one compressed network drawn from a subspace.
///
/// Flops count a multiply-accumulate as two operations. Overheads count one
/// operation per element touched by each pass over a tensor, and one per
/// layer for structured pruning, which only records a channel count.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CostReport {
    /// Flops of the uncompressed network.
    pub dense_flops: u64,
    /// Flops if pruned weights were skipped (equals `dense_flops` for
    /// quantization).
    pub compressed_flops: u64,
    /// Flops of the forward pass as executed: sliced layers for structured
    /// pruning, dense kernels otherwise.
    pub forward_flops: u64,
    /// Parameters that survive compression.
    pub nonzero_params: u64,
    /// Bits needed to store the surviving parameters.
    pub storage_bits: u64,
    /// Work to materialize `ω*(α)` and apply `f`.
    pub overhead_flops: u64,
}

impl CostReport {
    pub fn overhead_ratio(&self) -> f64 {
        self.overhead_flops as f64 / self.forward_flops.max(1) as f64
    }
}

pub fn compression_cost(
    model: &Model,
    subspace: SubspaceKind,
    level: Level,
    quantize_first_last: bool,
) -> Result<CostReport, CompressionError> {
    let descs = model.descriptors();
    let geometry = model.layer_geometry()?;
    let plan = match level {
        Level::Width(g) => Some(channel_plan(model, g)?),
        _ => None,
    };

    let mut r = CostReport::default();
    let mut weight_bits = 0u64;
    for g in &geometry {
        let d = &descs[g.index];
        let full = (d.in_channels * d.out_channels * g.kernel_area) as u64;
        let exempt = d.is_first_layer || d.is_last_layer;
        let positions = g.out_positions as u64;
        r.dense_flops += 2 * full * positions;
        match level {
            Level::Dense => {
                r.compressed_flops += 2 * full * positions;
                r.forward_flops += 2 * full * positions;
                r.nonzero_params += full;
                weight_bits += 32 * full;
            }
            Level::Width(_) => {
                let (kin, kout) = plan.as_ref().and_then(|p| p.widths[g.index]).expect("plan covers layer");
                let kept = (kin * kout * g.kernel_area) as u64;
                r.compressed_flops += 2 * kept * positions;
                r.forward_flops += 2 * kept * positions;
                r.nonzero_params += kept;
                weight_bits += 32 * kept;
                r.overhead_flops += 1;
            }
            Level::Sparsity(s) => {
                let zeroed = if exempt { 0 } else { topk_zero_count(full as usize, s) as u64 };
                r.compressed_flops += 2 * (full - zeroed) * positions;
                r.forward_flops += 2 * full * positions;
                r.nonzero_params += full - zeroed;
                weight_bits += 32 * (full - zeroed);
                if !exempt && s > 0.0 {
                    r.overhead_flops += full;
                }
            }
            Level::Bits(b) => {
                r.compressed_flops += 2 * full * positions;
                r.forward_flops += 2 * full * positions;
                r.nonzero_params += full;
                if exempt && !quantize_first_last {
                    weight_bits += 32 * full;
                } else {
                    weight_bits += u64::from(b) * full;
                    r.overhead_flops += full;
                }
            }
        }
    }

    // biases and norm affines: stored at full precision, pruned with their
    // channel under structured compression. Slicing commutes with
    // interpolation, so a sliced network only materializes what it keeps.
    let mut materialized = 0u64;
    for spec in model.param_specs() {
        let n: u64 = spec.shape.iter().product::<usize>() as u64;
        let interpolated = match subspace {
            SubspaceKind::Point => false,
            SubspaceKind::Linear => true,
            SubspaceKind::Hybrid => spec.kind.is_norm_affine(),
        };
        let d = descs.iter().position(|d| d.name == spec.layer).expect("spec layer exists");
        let kept = match &plan {
            Some(p) if spec.kind == ParamKind::Weight => {
                let (kin, kout) = p.widths[d].expect("plan covers weighted layers");
                n / (descs[d].in_channels * descs[d].out_channels) as u64 * (kin * kout) as u64
            }
            Some(p) => {
                let width = (0..=d)
                    .rev()
                    .find_map(|i| p.widths[i].map(|(_, kout)| kout))
                    .unwrap_or(n as usize);
                width.min(n as usize) as u64
            }
            None => n,
        };
        if interpolated {
            materialized += kept;
        }
        if spec.kind == ParamKind::Weight {
            continue;
        }
        r.nonzero_params += kept;
        weight_bits += 32 * kept;
    }
    r.overhead_flops += materialized;
    r.storage_bits = weight_bits;
    Ok(r)
}
