#![no_main]

use libfuzzer_sys::fuzz_target;
use zsseg::checkpoint::{matrices_to_string, parse_matrices};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(items) = parse_matrices(text) {
        let rendered = matrices_to_string(items.iter().map(|(n, m)| (n.as_str(), m)));
        let round = parse_matrices(&rendered).expect("round trip failed");
        assert_eq!(round, items);
    }
});
