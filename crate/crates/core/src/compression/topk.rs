use crate::tensor::Scalar;

/// Number of entries zeroed at sparsity `gamma` in a layer of `n` weights:
/// `⌊γ·n⌋`, with products within rounding error of an integer snapped to it
/// (so `0.29 · 100` zeroes 29, not 28).
pub fn topk_zero_count(n: usize, gamma: f64) -> usize {
    let x = gamma * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 * x.abs().max(1.0) { nearest } else { x.floor() };
    (k.max(0.0) as usize).min(n)
}

/// Keep-mask (1 = kept) that zeroes the `⌊γ·n⌋` smallest-magnitude entries.
/// Equal magnitudes are ordered by index, so the earlier entry is pruned
/// first.
pub fn topk_mask<T: Scalar>(values: &[T], gamma: f64) -> Vec<T> {
    let n = values.len();
    let k = topk_zero_count(n, gamma);
    let mut mask = vec![T::one(); n];
    if k == 0 {
        return mask;
    }
    let key = |i: usize| (values[i].abs(), i);
    let mut order: Vec<usize> = (0..n).collect();
    if k < n {
        order.select_nth_unstable_by(k - 1, |&a, &b| {
            let (ma, ia) = key(a);
            let (mb, ib) = key(b);
            ma.partial_cmp(&mb).unwrap_or(std::cmp::Ordering::Equal).then(ia.cmp(&ib))
        });
    }
    for &i in &order[..k] {
        mask[i] = T::zero();
    }
    mask
}

/// Applies [`topk_mask`] in place.
pub fn topk_in_place<T: Scalar>(values: &mut [T], gamma: f64) {
    let mask = topk_mask(values, gamma);
    for (v, m) in values.iter_mut().zip(mask) {
        *v = *v * m;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example() {
        let mut v = [0.5f32, -0.2, 0.1, -0.8];
        topk_in_place(&mut v, 0.5);
        assert_eq!(v, [0.5, 0.0, 0.0, -0.8]);
    }

    #[test]
    fn ties_prune_earlier_first() {
        let mut v = [1.0f32, -1.0, 1.0, 2.0];
        topk_in_place(&mut v, 0.5);
        assert_eq!(v, [0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn decimal_sparsities_count_exactly() {
        assert_eq!(topk_zero_count(100, 0.29), 29);
        assert_eq!(topk_zero_count(1000, 0.57), 570);
        assert_eq!(topk_zero_count(10, 0.99), 9);
        assert_eq!(topk_zero_count(3, 0.5), 1);
    }

    #[test]
    fn zero_gamma_is_identity() {
        let v = [3.0f64, -1.0];
        assert_eq!(topk_mask(&v, 0.0), vec![1.0, 1.0]);
    }
}
