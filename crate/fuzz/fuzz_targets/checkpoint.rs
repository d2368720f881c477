#![no_main]

use i2e_core::trainer::TrainerState;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(state) = TrainerState::decode(data) {
        let bytes = state.encode();
        let again = TrainerState::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode(), bytes);
    }
});
