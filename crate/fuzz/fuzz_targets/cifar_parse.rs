#![no_main]

use lcs_core::data::parse_cifar;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(d) = parse_cifar(data, "fuzz") {
        assert_eq!(d.len() * lcs_core::data::CIFAR_RECORD, data.len());
    }
});
