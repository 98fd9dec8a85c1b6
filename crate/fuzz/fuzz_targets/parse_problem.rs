#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(p) = memlqr::model::parse_problem(text) {
        // anything accepted must survive a round trip
        let again = serde_json::to_string(&memlqr::model::to_problem_file(&p)).unwrap();
        assert_eq!(memlqr::model::parse_problem(&again).unwrap(), p);
    }
});
