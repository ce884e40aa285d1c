#![no_main]

use libfuzzer_sys::fuzz_target;
use topofilt::io::{cloud_from_csv, cloud_to_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(pc) = cloud_from_csv(text) {
        let again = cloud_from_csv(&cloud_to_csv(&pc)).expect("written cloud parses");
        assert_eq!(again, pc);
    }
});
