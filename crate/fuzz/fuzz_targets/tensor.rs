#![no_main]
use libfuzzer_sys::fuzz_target;
use logoins_core::backend::{decode_tensor, encode_tensor};

fuzz_target!(|data: &[u8]| {
    if let Ok(values) = decode_tensor(data) {
        let bytes = encode_tensor(&values);
        let back = decode_tensor(&bytes).expect("re-decode");
        assert_eq!(back.len(), values.len());
        assert!(back.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
});
