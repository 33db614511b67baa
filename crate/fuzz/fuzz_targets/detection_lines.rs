#![no_main]

use clq::postprocess::{parse_detection_lines, write_detection_lines};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(lines) = parse_detection_lines(text) {
        // the 6-decimal format is a fixed point of parse -> write
        let written = write_detection_lines(&lines);
        let again = parse_detection_lines(&written).expect("written lines must parse");
        assert_eq!(again.len(), lines.len());
    }
});
