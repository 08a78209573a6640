#![no_main]

use ahat::logic::{parse_formula, parse_spanned};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(f) = parse_formula(s) {
        // printing must reparse to the same tree
        assert_eq!(parse_formula(&f.to_string()).unwrap(), f);
        let p = parse_spanned(s).unwrap();
        assert_eq!(p.spans.len(), f.preorder().len());
    }
});
