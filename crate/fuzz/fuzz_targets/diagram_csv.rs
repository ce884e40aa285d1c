#![no_main]

use libfuzzer_sys::fuzz_target;
use topofilt::io::{diagram_from_csv, diagram_to_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(diag) = diagram_from_csv(text) {
        let again = diagram_from_csv(&diagram_to_csv(&diag)).expect("written diagram parses");
        assert_eq!(again, diag);
    }
});
