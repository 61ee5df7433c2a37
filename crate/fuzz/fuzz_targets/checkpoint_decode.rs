#![no_main]

use lcs_core::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // anything that decodes must re-encode to the same bytes
    if let Ok(c) = Checkpoint::decode(data) {
        let bytes = c.encode().expect("decoded checkpoints re-encode");
        assert_eq!(bytes, data);
    }
});
