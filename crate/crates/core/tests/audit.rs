use poslab::kernels::{
    audit, enumerate_position_params, group_thousands, param_count, render_audit, table_methods, MethodKind,
    MethodSpec, ModelDims,
};
use proptest::prelude::*;

fn variants(kind: MethodKind) -> Vec<MethodSpec> {
    let mut out = Vec::new();
    for shared in [true, false] {
        for reset in [false, true] {
            for absolute in [false, true] {
                for untied in [false, true] {
                    let spec = MethodSpec::new(kind)
                        .with_sharing(shared)
                        .with_reset(reset)
                        .with_absolute(absolute)
                        .with_untied(untied);
                    if spec.validate().is_ok() {
                        out.push(spec);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn enumeration_matches_closed_form_for_every_variant() {
    let dims = ModelDims::new(2, 9, 12, 3);
    let mut checked = 0;
    for kind in MethodKind::ALL {
        for spec in variants(kind) {
            for k in [1, 3, 8, 20] {
                let spec = if kind.uses_vector_table() { spec.with_clip(k) } else { spec };
                assert_eq!(
                    enumerate_position_params(&spec, dims).unwrap(),
                    param_count(&spec, dims).unwrap(),
                    "{spec}"
                );
                checked += 1;
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn table_rows_at_base_scale() {
    let dims = ModelDims::new(12, 512, 768, 12);
    let rows = audit(&table_methods(dims), dims).unwrap();
    let want = [393_216, 785_664, 12_276, 12_276, 785_664, 834_816, 454_644, 785_664];
    for (row, w) in rows.iter().zip(want) {
        assert!(row.matches(), "{row:?}");
        assert_eq!(row.closed_form, w, "{}", row.method);
    }
    let text = render_audit(&rows);
    assert!(text.contains("834,816"));
    assert_eq!(group_thousands(454_644), "454,644");
    assert_eq!(group_thousands(12), "12");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn enumeration_matches_on_random_dims(
        layers in 1usize..4,
        max_len in 2usize..24,
        heads in 1usize..5,
        width in 1usize..6,
        kind_index in 0usize..11,
        k in 1usize..30,
        shared in any::<bool>(),
    ) {
        let kind = MethodKind::ALL[kind_index];
        let dims = ModelDims::new(layers, max_len, heads * width * 2, heads);
        let mut spec = MethodSpec::new(kind).with_sharing(shared);
        if kind.uses_vector_table() {
            spec = spec.with_clip(k);
        }
        prop_assert_eq!(enumerate_position_params(&spec, dims).unwrap(), param_count(&spec, dims).unwrap());
    }
}
