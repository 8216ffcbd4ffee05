//! Forward passes against dense reference implementations.

mod common;

use common::*;
use kvlp_core::fusion::co_attention;
use kvlp_core::kb::build_matching_matrix;
use kvlp_core::nn::NormOrder;
use kvlp_core::objectives::alignment_scores;
use kvlp_core::params::Ctx;

const TOL: f64 = 1e-6;

#[test]
fn text_embedding_is_token_plus_position_rows() {
    let model = tiny_model(NormOrder::Pre, true);
    let sample = tiny_sample(0);
    let mut ctx = Ctx::new(&model.store);
    let x = model.text.embed(&mut ctx, &sample.ids).unwrap();
    let want = text_embedding(&model, &sample.ids);
    assert_eq!(want.len(), sample.ids.len() + 2);
    assert!(max_diff(&mat(ctx.g.value(x)), &want) <= TOL);
}

#[test]
fn image_embedding_with_and_without_masking() {
    let model = tiny_model(NormOrder::Pre, true);
    let sample = tiny_sample(1);
    let patches = mat(&sample.grid.patches);
    for masked in [vec![], vec![0, 2], vec![0, 1, 2, 3]] {
        let mut ctx = Ctx::new(&model.store);
        let x = model.vision.embed(&mut ctx, &sample.grid, &masked).unwrap();
        assert!(max_diff(&mat(ctx.g.value(x)), &image_embedding(&model, &patches, &masked)) <= TOL);
    }
}

#[test]
fn patch_rows_follow_row_major_grid_order() {
    let pixels: Vec<f32> = (0..16).map(|i| i as f32 / 16.0).collect();
    let grid = kvlp_core::encoders::PatchGrid::<f64>::from_pixels(&pixels, 4, 4, 1, 2).unwrap();
    let want = [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]];
    for (r, px) in want.iter().enumerate() {
        let got: Vec<f64> = grid.patches.row(r).to_vec();
        let exp: Vec<f64> = px.iter().map(|&i| f64::from(i as f32 / 16.0)).collect();
        assert_eq!(got, exp);
    }
}

#[test]
fn multi_head_attention_and_captured_weights() {
    let model = tiny_model(NormOrder::Pre, true);
    let a = model.fusion[0].text.cross_attn;
    let xq = mat(&random_table(5, 8, 1));
    let xkv = mat(&random_table(7, 8, 2));
    let mut ctx = Ctx::new(&model.store).capture_attention();
    let q = ctx.constant(kvlp_tensor::Tensor::from_rows(&xq).unwrap()).unwrap();
    let kv = ctx.constant(kvlp_tensor::Tensor::from_rows(&xkv).unwrap()).unwrap();
    let y = a.forward(&mut ctx, q, kv, "probe").unwrap();
    let (want, weights) = attention(&model.store, &a, &xq, &xkv);
    assert!(max_diff(&mat(ctx.g.value(y)), &want) <= TOL);
    let maps = ctx.attention.unwrap();
    assert_eq!(maps.len(), 1);
    assert_eq!(maps[0].0, "probe");
    assert!(max_diff(&mat(&maps[0].1), &weights) <= TOL);
    for row in &weights {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn encoders_match_reference_stack() {
    let model = tiny_model(NormOrder::Pre, true);
    let sample = tiny_sample(0);
    let mut ctx = model.ctx();
    let hl = model.encode_text(&mut ctx, &sample.ids).unwrap();
    let hv = model.encode_image(&mut ctx, &sample.grid, &[1]).unwrap();
    let want_l = encoder(&model, &model.text.layers, text_embedding(&model, &sample.ids));
    let want_v = encoder(&model, &model.vision.layers, image_embedding(&model, &mat(&sample.grid.patches), &[1]));
    assert!(max_diff(&mat(ctx.g.value(hl)), &want_l) <= TOL);
    assert!(max_diff(&mat(ctx.g.value(hv)), &want_v) <= TOL);
}

#[test]
fn co_attention_matches_reference() {
    let model = tiny_model(NormOrder::Pre, true);
    let hv = mat(&random_table(5, 8, 3));
    let hl = mat(&random_table(9, 8, 4));
    let mut ctx = model.ctx();
    let v = ctx.constant(kvlp_tensor::Tensor::from_rows(&hv).unwrap()).unwrap();
    let l = ctx.constant(kvlp_tensor::Tensor::from_rows(&hl).unwrap()).unwrap();
    let layer = &model.fusion[0];
    let co = co_attention(&mut ctx, layer, v, l, NormOrder::Pre, "fusion.0").unwrap();
    let s = &model.store;
    let vs = pre_block_self(s, &layer.vision, &hv);
    let ls = pre_block_self(s, &layer.text, &hl);
    assert!(max_diff(&mat(ctx.g.value(co.vs)), &vs) <= TOL);
    assert!(max_diff(&mat(ctx.g.value(co.ls)), &ls) <= TOL);
    assert!(max_diff(&mat(ctx.g.value(co.vc)), &pre_block_cross(s, &layer.vision, &vs, &ls)) <= TOL);
    assert!(max_diff(&mat(ctx.g.value(co.lc)), &pre_block_cross(s, &layer.text, &ls, &vs)) <= TOL);
}

fn padded_p_oracle(n_tokens: usize, spans: &[(usize, usize)]) -> M {
    let mut p = vec![vec![0.0; spans.len()]; n_tokens + 2];
    for (j, &(a, b)) in spans.iter().enumerate() {
        for row in p.iter_mut().take(b + 1).skip(a + 1) {
            row[j] = 1.0;
        }
    }
    p
}

#[test]
fn matching_matrix_marks_mention_spans() {
    let sample = tiny_sample(3);
    // "apple and apple under heaven": three mentions, two of one entity
    let spans: Vec<(usize, usize)> = sample.linked.mentions.iter().map(|m| (m.start, m.end)).collect();
    assert_eq!(spans, vec![(0, 1), (2, 3), (4, 5)]);
    assert_eq!(sample.mention_entities(), vec![0, 0, 2]);
    let p = build_matching_matrix(&sample.linked);
    assert_eq!(p.total(), 3);
    let dense = mat(&p.to_padded_tensor::<f64>(false));
    assert_eq!(dense, padded_p_oracle(5, &spans));
    assert!(dense[0].iter().chain(dense.last().unwrap()).all(|&v| v == 0.0));

    let two = tiny_sample(0);
    let spans: Vec<(usize, usize)> = two.linked.mentions.iter().map(|m| (m.start, m.end)).collect();
    assert_eq!(spans, vec![(1, 3), (6, 7)]);
    assert_eq!(mat(&two.linked.match_matrix().to_padded_tensor::<f64>(false)), padded_p_oracle(7, &spans));
}

#[test]
fn knowledge_fusion_matches_reference() {
    let model = tiny_model(NormOrder::Pre, true);
    for i in 0..TINY_TEXTS.len() {
        let sample = tiny_sample(i);
        let mut ctx = model.ctx();
        let hv = model.encode_image(&mut ctx, &sample.grid, &[]).unwrap();
        let hl = model.encode_text(&mut ctx, &sample.ids).unwrap();
        let ents = sample.mention_entities();
        let out = model.fuse(&mut ctx, hv, hl, &ents, &sample.linked.match_matrix()).unwrap();
        let p = mat(&sample.linked.match_matrix().to_padded_tensor::<f64>(false));
        let want = fusion(&model, mat(ctx.g.value(hv)), mat(ctx.g.value(hl)), &ents, &p);
        assert!(max_diff(&mat(ctx.g.value(out.zv)), &want.zv) <= TOL, "text {i}");
        assert!(max_diff(&mat(ctx.g.value(out.zl)), &want.zl) <= TOL, "text {i}");
        match (out.ze, want.ze) {
            (Some(a), Some(b)) => assert!(max_diff(&mat(ctx.g.value(a)), &b) <= TOL),
            (None, None) => assert!(ents.is_empty()),
            _ => panic!("entity stream presence differs for text {i}"),
        }
    }
}

#[test]
fn alignment_logits_match_bilinear_form() {
    let model = tiny_model(NormOrder::Pre, true);
    let sample = tiny_sample(0);
    let mut ctx = model.ctx();
    let hv = model.encode_image(&mut ctx, &sample.grid, &[]).unwrap();
    let hl = model.encode_text(&mut ctx, &sample.ids).unwrap();
    let s = &model.store;
    let e = mat(s.value(model.align_entities));
    for (h, w) in [(hv, model.w_vk), (hl, model.w_lk)] {
        let logits = model.alignment_logits(&mut ctx, h, w).unwrap();
        let h0 = mat(ctx.g.value(h))[0].clone();
        let wm = mat(s.value(w));
        let want: Vec<f64> = e
            .iter()
            .map(|ei| {
                (0..ei.len())
                    .map(|a| ei[a] * (0..h0.len()).map(|b| wm[a][b] * h0[b]).sum::<f64>())
                    .sum()
            })
            .collect();
        assert!(max_diff(&mat(ctx.g.value(logits)), &vec![want.clone()]) <= TOL);
        let h_row = ctx.g.value(h).row(0).to_vec();
        let (pv, pl) = alignment_scores(&h_row, &h_row, s.value(model.align_entities), s.value(w), s.value(w)).unwrap();
        for ((a, b), z) in pv.iter().zip(&pl).zip(&want) {
            assert!((a - sigmoid(*z)).abs() <= TOL && (b - sigmoid(*z)).abs() <= TOL);
        }
    }
}
