#![no_main]

use libfuzzer_sys::fuzz_target;
use topofilt::io::parse_labels;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_labels(text) {
        assert!(rows.iter().all(|(f, _)| !f.contains("..")));
    }
});
