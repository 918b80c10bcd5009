#![no_main]

use libfuzzer_sys::fuzz_target;
use qbsde::paths::PathEnsemble;

/// Keeps hostile headers from asking for gigabytes.
const BUDGET: usize = 1 << 20;

fuzz_target!(|data: &[u8]| {
    if let Ok(ens) = PathEnsemble::decode_with_budget(data, BUDGET) {
        let bytes = ens.encode();
        let again = PathEnsemble::decode_with_budget(&bytes, BUDGET).expect("re-encoded ensemble decodes");
        assert_eq!(again.encode(), bytes);
    }
});
