#![no_main]

use ahat::ir::TransformerIR;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(t) = TransformerIR::from_json(s) {
        let _ = t.validate();
        assert_eq!(TransformerIR::from_json(&t.to_json()).unwrap(), t);
    }
});
