#![no_main]

use lcs_core::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::from_text(text) {
        let canonical = cfg.to_text();
        let again = RunConfig::from_text(&canonical).expect("canonical text parses");
        assert_eq!(again.to_text(), canonical);
        let _ = cfg.validate();
    }
});
