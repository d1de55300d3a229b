#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = lore_core::ModelParams::from_bytes(data) {
        assert_eq!(lore_core::ModelParams::from_bytes(&p.to_bytes()).unwrap(), p);
    }
});
