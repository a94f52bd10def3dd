use annoreg::deform::warp_annotation_set;
use annoreg::synth::{annotation_dice, gen_case, gen_predictions, gen_smooth_field, SynthSpec};
use annoreg::tissue::{build_manifest, LabelColumn, TileParams};

#[test]
fn generators_are_deterministic() {
    let spec = SynthSpec { seed: 17, ..SynthSpec::default() };
    let a = gen_case(&spec, 2).unwrap();
    let b = gen_case(&spec, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.he_annotations, gen_case(&spec, 3).unwrap().he_annotations);
    assert_eq!(gen_smooth_field(5, 9, 7, 500.0, 40.0).unwrap(), gen_smooth_field(5, 9, 7, 500.0, 40.0).unwrap());

    let registered = warp_annotation_set(&a.field, &a.he_annotations, &a.case.ihc_slide_id).unwrap();
    let m = build_manifest(&a.case, Some(&a.ihc_annotations), Some(&registered), &a.ihc_tissue, &TileParams::default()).unwrap();
    let p1 = gen_predictions(&m, LabelColumn::Ihc, 0.95, 4, 3).unwrap();
    let p2 = gen_predictions(&m, LabelColumn::Ihc, 0.95, 4, 3).unwrap();
    assert_eq!(p1, p2);
    assert!((p1.pooled_auroc - 0.95).abs() <= 0.01);
}

#[test]
fn larger_displacement_lowers_annotation_dice() {
    // unregistered H&E outlines against IHC outlines, which equal the
    // registered ones under a (1, 1) band
    let levels = [0.0, 60.0, 150.0, 300.0];
    let means: Vec<f64> = levels
        .iter()
        .map(|&max| {
            let total: f64 = (0..30u64)
                .map(|seed| {
                    let spec = SynthSpec { seed, max_displacement_um: max, ..SynthSpec::identity(seed) };
                    let c = gen_case(&spec, 0).unwrap();
                    let he_in_ihc = warp_annotation_set(
                        &annoreg::deform::DeformationField::zero(2, 2, 1.0).unwrap(),
                        &c.he_annotations,
                        &c.case.ihc_slide_id,
                    )
                    .unwrap();
                    annotation_dice(&he_in_ihc, &c.ihc_annotations, spec.slide_extent_um, spec.mask_resolution_um).unwrap()
                })
                .sum();
            total / 30.0
        })
        .collect();
    assert_eq!(means[0], 1.0);
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "{means:?}");
    }
    assert!(means[3] < 0.97, "{means:?}");
}
