#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = lore_tensor::blob_from_bytes(data) {
        assert!(lore_tensor::blob_to_bytes(&t).len() <= data.len());
    }
});
