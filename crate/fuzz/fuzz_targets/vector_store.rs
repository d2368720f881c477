#![no_main]

use i2e_core::store::VectorStore;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = VectorStore::decode(data) {
        let bytes = store.encode();
        let again = VectorStore::decode(&bytes).expect("re-encoded store decodes");
        assert_eq!(again.encode(), bytes);
    }
});
