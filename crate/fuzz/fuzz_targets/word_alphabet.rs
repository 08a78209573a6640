#![no_main]

use ahat::sim::{parse_alphabet, tokenize};
use libfuzzer_sys::fuzz_target;

// Input: alphabet manifest, a NUL byte, then the word.
fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let (manifest, word) = s.split_once('\0').unwrap_or((s, ""));
    let Ok(alphabet) = parse_alphabet(manifest) else { return };
    if let Ok(toks) = tokenize(word, &alphabet) {
        assert!(toks.iter().all(|t| alphabet.contains(t)));
        let squeezed: String = word.split_whitespace().collect();
        assert_eq!(toks.concat(), squeezed);
    }
});
