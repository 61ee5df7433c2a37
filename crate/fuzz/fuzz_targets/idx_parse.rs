#![no_main]

use lcs_core::data::{idx_dataset, parse_idx};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // first byte splits the input into an image file and a label file
    let Some((&cut, rest)) = data.split_first() else {
        return;
    };
    let cut = usize::from(cut).min(rest.len());
    let (labels, images) = rest.split_at(cut);
    if let (Ok(im), Ok(lb)) = (parse_idx(images), parse_idx(labels)) {
        let _ = idx_dataset(&im, &lb, "fuzz");
    }
});
