#![no_main]

use ahat::circuit::parse_circuit;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(c) = parse_circuit(s) {
        assert_eq!(parse_circuit(&c.to_string()).unwrap(), c);
        if c.arity() <= 8 && c.size() <= 64 {
            let x = vec![true; c.arity()];
            let _ = c.eval(&x).unwrap();
        }
    }
});
