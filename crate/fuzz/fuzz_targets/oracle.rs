#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(o) = lore_bench::oracle::Oracle::from_bytes(data) {
        assert_eq!(o.to_bytes().len(), data.len());
    }
});
