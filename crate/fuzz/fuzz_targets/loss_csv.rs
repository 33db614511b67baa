#![no_main]

use clq::harness::plot::{loss_curves_svg, parse_loss_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rows) = parse_loss_csv(text) {
        // plotting parsed rows must never panic
        let _ = loss_curves_svg(&rows);
    }
});
