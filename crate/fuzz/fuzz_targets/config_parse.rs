#![no_main]

use clq::harness::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse(text) {
        // a parsed config must survive the canonical round trip
        let canonical = cfg.serialize();
        let back = RunConfig::parse(&canonical).expect("canonical form must parse");
        assert_eq!(back, cfg);
    }
});
