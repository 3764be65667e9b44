mod common;

use fxqat::fxp_core::{
    dequantize_qformat, quantize_qformat, requantize, select_qformat, BitWidth, QFormat,
};
use proptest::prelude::*;

#[test]
fn unit_quantizer_properties_for_every_supported_width() {
    for bits in 4..=16 {
        if let Some(v) = common::quantizer_violation(bits, 100_000, 17) {
            panic!("{v}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn qformat_error_is_half_a_step_inside_range(f in -7.9f64..7.9, bits in 8u32..=16) {
        let b = BitWidth::new(bits).unwrap();
        let q = select_qformat(8.0, b).unwrap();
        let back = dequantize_qformat(quantize_qformat(f, b, q).unwrap());
        prop_assert!((back - f).abs() <= 0.5 / q.scale() + 1e-12);
    }

    #[test]
    fn requantize_round_trips_up_shifts(v in -30_000i64..30_000, from in 0i32..12, up in 0i32..8) {
        prop_assert_eq!(requantize(requantize(v, from, from + up), from + up, from), v);
    }

    #[test]
    fn selected_qformat_never_clips_positive_values(m in 1e-3f64..100.0, bits in 4u32..=16) {
        let b = BitWidth::new(bits).unwrap();
        let q = select_qformat(m, b).unwrap();
        if q.get() > 0 {
            prop_assert!(m * q.scale() <= b.half_range() as f64);
            let finer = QFormat::new(q.get() + 1).unwrap();
            prop_assert!(m * finer.scale() > b.half_range() as f64);
        }
    }
}
