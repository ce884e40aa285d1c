#![no_main]

use libfuzzer_sys::fuzz_target;
use topofilt::io::{parse_config, write_config};
use topofilt::training::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(map) = parse_config(text) {
        assert_eq!(parse_config(&write_config(&map)).expect("written config parses"), map);
        let _ = ExperimentConfig::from_map(&map);
    }
});
