#![no_main]

use libfuzzer_sys::fuzz_target;
use unirope::config::TaskSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = TaskSpec::parse(text) {
        assert_eq!(TaskSpec::parse(&spec.to_string()).expect("displayed spec parses"), spec);
    }
});
