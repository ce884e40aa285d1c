#![no_main]

use libfuzzer_sys::fuzz_target;
use topofilt::io::{distances_from_csv, distances_to_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(d) = distances_from_csv(text) {
        let again = distances_from_csv(&distances_to_csv(&d)).expect("written matrix parses");
        assert_eq!(again, d);
    }
});
