#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|bytes: &[u8]| {
    if let Ok(d) = memlqr::dump::decode_table(bytes) {
        let again = memlqr::dump::encode(d.n, d.steps, d.step, &d.blocks);
        assert_eq!(again, bytes);
    }
});
