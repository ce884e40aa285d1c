#![no_main]

use libfuzzer_sys::fuzz_target;
use topofilt::autodiff::Checkpoint;
use topofilt::training::load_models;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ckpt) = Checkpoint::from_json(text) {
        let _ = load_models(&ckpt);
    }
});
