use rsp_core::cost::{count_flops, count_params, rse_params};
use rsp_core::model::{Architecture, BackboneConfig, HeadConfig, SegModel};
use rsp_core::rse::RseConfig;
use rsp_core::{Tape, Tensor};

fn heads(c: usize) -> Vec<(&'static str, HeadConfig)> {
    let rse = RseConfig::new(c).with_window(3, 1);
    vec![
        ("baseline", HeadConfig::baseline(c, 4)),
        ("baseline67", HeadConfig::baseline_p67(c, 4)),
        ("rsp2", HeadConfig::rsp2(c, 4, rse.clone())),
        ("rsp4", HeadConfig::rsp4(c, 4, rse.clone())),
        ("rsp76", HeadConfig::with_rsp_sites(7, c, 4, &[(7, 6), (6, 5)], rse.clone())),
        ("wide", HeadConfig::rsp2(c, 4, rse).with_fpn_channels(2 * c)),
    ]
}

fn pyramid(head: HeadConfig) -> Architecture {
    Architecture::Pyramid { backbone: BackboneConfig { widths: [4, 6, 8, 10] }, head }
}

#[test]
fn parameter_counts_match_instantiated_models() {
    for (name, head) in heads(8) {
        let arch = pyramid(head);
        let report = count_params(&arch);
        let model = SegModel::new(arch, 0).unwrap();
        assert_eq!(report.total_params(), model.params.scalar_count() as u64, "{name}");
        assert_eq!(report.row("backbone").unwrap().params, model.params.scalar_count_with_prefix("backbone.") as u64);
        let fuse: u64 = report.rows.iter().filter(|r| r.module.starts_with("fuse")).map(|r| r.params).sum();
        assert_eq!(fuse, model.params.scalar_count_with_prefix("head.fuse") as u64, "{name}");
    }
    let pixel = Architecture::Pixel { num_classes: 5 };
    assert_eq!(count_params(&pixel).total_params(), SegModel::new(pixel, 0).unwrap().params.scalar_count() as u64);
}

#[test]
fn relation_operator_size() {
    // Wq, Wk: 8 -> 4 with bias; Wv: 8 -> 8 with bias; Wp: 8 -> 1 with bias
    assert_eq!(rse_params(&RseConfig::new(8)), 36 + 36 + 72 + 9);
}

#[test]
fn mult_adds_scale_with_area() {
    for (name, head) in heads(8) {
        let arch = pyramid(head);
        let a = count_flops(&arch, 128, 128).unwrap();
        let b = count_flops(&arch, 256, 256).unwrap();
        let c = count_flops(&arch, 128, 384).unwrap();
        assert_eq!(b.total_flops(), 4 * a.total_flops(), "{name}");
        assert_eq!(c.total_flops(), 3 * a.total_flops(), "{name}");
        assert_eq!(b.head_params(), a.head_params());
    }
    assert!(count_flops(&pyramid(HeadConfig::baseline(8, 4)), 100, 128).is_err());
}

#[test]
fn conv_rows_match_shapes_seen_in_a_forward_pass() {
    let head = HeadConfig::rsp2(8, 4, RseConfig::new(8).with_window(3, 1));
    let arch = pyramid(head);
    let model = SegModel::new(arch.clone(), 0).unwrap();
    let (h, w) = (128, 64);
    let mut tape = Tape::new();
    let vars = model.params.register(&mut tape, false);
    let x = tape.leaf(Tensor::zeros(&[1, 3, h, w]), false);
    let out = model.forward(&mut tape, &vars, x).unwrap();
    let levels = out.pyramid.unwrap().levels;

    let macs = |prefix: &str, level: usize| -> u64 {
        let s = tape.shape(levels[&level]);
        let area = (s[2] * s[3]) as u64;
        model.params.iter().filter(|(n, _)| n.starts_with(prefix) && n.ends_with(".weight")).map(|(_, t)| t.len() as u64 * area).sum()
    };
    let report = count_flops(&arch, h, w).unwrap();
    let lateral: u64 = (2..=5).map(|l| macs(&format!("pyramid.lateral{l}."), l)).sum();
    let q: u64 = (2..=5).map(|l| macs(&format!("pyramid.q{l}."), l)).sum();
    assert_eq!(report.row("lateral").unwrap().flops, lateral);
    assert_eq!(report.row("q_transform").unwrap().flops, q);
}

#[test]
fn relation_sites_add_cost_in_order() {
    let base = count_flops(&pyramid(HeadConfig::baseline(16, 4)), 256, 256).unwrap();
    let rse = RseConfig::new(16);
    let two = count_flops(&pyramid(HeadConfig::rsp2(16, 4, rse.clone())), 256, 256).unwrap();
    let four = count_flops(&pyramid(HeadConfig::rsp4(16, 4, rse)), 256, 256).unwrap();
    assert!(base.head_flops() < two.head_flops() && two.head_flops() < four.head_flops());
    assert!(base.head_params() < two.head_params() && two.head_params() < four.head_params());
    assert_eq!(base.row("backbone"), two.row("backbone"));
}
