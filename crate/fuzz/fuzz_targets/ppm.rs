#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = lore_bench::ppm::decode_ppm(data) {
        let bytes = lore_bench::ppm::encode_ppm(&img).unwrap();
        let again = lore_bench::ppm::decode_ppm(&bytes).unwrap();
        assert_eq!(lore_bench::ppm::encode_ppm(&again).unwrap(), bytes);
    }
});
