mod common;

use cdnet::data::{gen_dataset, GenConfig};
use cdnet::model::{Model, ModelConfig, Variant};
use cdnet::numerics::{Tape, Tensor};
use cdnet::Real;

#[test]
fn probe_preactivations() {
    let data_cfg = GenConfig {
        base_classes: 3,
        domains: 2,
        novel_classes: 2,
        raw_dim: 6,
        samples_per_class: 6,
        separation: 3.0,
        ..Default::default()
    };
    let ds = gen_dataset(&data_cfg, 7).unwrap();
    let model = Model::build(ModelConfig {
        raw_dim: 6,
        d: 4,
        c_e: 3,
        c_d: 2,
        j: 3,
        variant: Variant::Sequential,
        seed: 8,
    })
    .unwrap();
    let enc = common::RefEncoder::from_model(&model);
    let ld = common::RefLd::from_model(&model, "ld.shared");
    let dom = common::RefDomainHead::from_model(&model);

    for idx in [0usize, 7, 13, 20] {
        let raw = &ds.sample(idx).raw;
        // encoder hidden preact
        let h1 = common::affine(&enc.w1, raw, &enc.b1);
        report("enc.h1", &h1);
        let x0 = enc.encode(raw);
        let trace = common::ref_cascade(&ld, &x0, 3);
        for (i, input) in trace.inputs.iter().enumerate() {
            let px = common::matvec(&ld.p, input);
            report(&format!("prelu{i}"), &px);
            let mut xp = input.clone();
            xp.extend_from_slice(&trace.prototypes[i]);
            let wh1 = common::affine(&ld.w1, &xp, &ld.b1);
            report(&format!("w.h1 {i}"), &wh1);
            let wh2 = common::affine(&ld.w2, &common::relu(&wh1), &ld.b2);
            report(&format!("w.h2 {i}"), &wh2);
        }
        let dh = common::affine(&dom.w1, &trace.r_d, &dom.b1);
        report("dom.h1", &dh);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let fwd = model
            .forward_sample(&mut tape, &binding, &Tensor::vector(raw.clone()).unwrap())
            .unwrap();
        let _ = fwd;
    }
}

fn report(what: &str, vals: &[Real]) {
    let min = vals.iter().map(|v| v.abs()).fold(Real::INFINITY, Real::min);
    if min < 1e-4 {
        println!("{what}: min |preact| = {min:.3e}  ({vals:?})");
    }
}
