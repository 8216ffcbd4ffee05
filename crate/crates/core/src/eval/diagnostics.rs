//! Per-sample dumps: entity similarity vectors, fusion attention maps and
//! aggregate embeddings.

use std::fmt::Write as _;
use std::path::Path;

use kvlp_tensor::{Scalar, Tensor};
use serde::Serialize;

use crate::data::Sample;
use crate::error::{IoContext, Result};
use crate::model::Model;
use crate::objectives::alignment_scores;
use crate::params::{Ctx, Group};

#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticsSummary {
    pub sample: String,
    pub n_entities: usize,
    pub n_tokens: usize,
    pub n_mentions: usize,
    pub n_patches: usize,
    /// 0-based rank in `p_l` of each entity mentioned in the text.
    pub text_entity_ranks: Vec<usize>,
    pub files: Vec<String>,
}

fn matrix_csv<T: Scalar>(t: &Tensor<T>) -> String {
    let mut s = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{:e}", v.as_f64())).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Writes `alignment.csv`, `attention_<layer>_text_image.csv`,
/// `attention_<layer>_entity_image.csv`, `embeddings.csv` and `summary.json`.
pub fn dump_diagnostics<T: Scalar>(model: &Model<T>, sample: &Sample<T>, entity_ids: &[String], out: &Path) -> Result<DiagnosticsSummary> {
    std::fs::create_dir_all(out).at(out)?;
    let mut ctx = Ctx::new(&model.store)
        .freeze_group(Group::Encoder)
        .freeze_group(Group::Rest)
        .capture_attention();
    let hv = model.encode_image(&mut ctx, &sample.grid, &[])?;
    let hl = model.encode_text(&mut ctx, &sample.ids)?;
    let fused = model.fuse(&mut ctx, hv, hl, &sample.mention_entities(), &sample.linked.match_matrix())?;

    let store = &model.store;
    let (pv, pl) = alignment_scores(
        ctx.g.value(hv).row(0),
        ctx.g.value(hl).row(0),
        store.value(model.align_entities),
        store.value(model.w_vk),
        store.value(model.w_lk),
    )?;
    let mut files = Vec::new();
    let mut write = |name: String, body: String| -> Result<()> {
        std::fs::write(out.join(&name), body).at(out.join(&name))?;
        files.push(name);
        Ok(())
    };

    let mut csv = String::from("row,entity,p_v,p_l,in_text\n");
    for i in 0..pv.len() {
        let id = entity_ids.get(i).map_or("", String::as_str);
        let _ = writeln!(
            csv,
            "{},{},{:e},{:e},{}",
            i,
            id,
            pv[i].as_f64(),
            pl[i].as_f64(),
            u8::from(sample.entities.contains(&i))
        );
    }
    write("alignment.csv".into(), csv)?;

    let maps = ctx.attention.take().unwrap_or_default();
    for (site, w) in &maps {
        let Some(rest) = site.strip_prefix("fusion.") else { continue };
        for kind in ["text_image", "entity_image"] {
            if let Some(layer) = rest.strip_suffix(&format!(".{kind}")) {
                write(format!("attention_{layer}_{kind}.csv"), matrix_csv(w))?;
            }
        }
    }

    let mut emb = String::new();
    for (name, v) in [("h_v", hv), ("h_l", hl), ("z_v", fused.zv), ("z_l", fused.zl)] {
        let row: Vec<String> = ctx.g.value(v).row(0).iter().map(|x| format!("{:e}", x.as_f64())).collect();
        let _ = writeln!(emb, "{},{}", name, row.join(","));
    }
    write("embeddings.csv".into(), emb)?;

    let scores: Vec<f64> = pl.iter().map(|p| p.as_f64()).collect();
    let text_entity_ranks = sample
        .entities
        .iter()
        .map(|&e| scores.iter().filter(|&&s| s > scores[e]).count())
        .collect();
    let summary = DiagnosticsSummary {
        sample: sample.id.clone(),
        n_entities: pv.len(),
        n_tokens: sample.ids.len(),
        n_mentions: sample.linked.mentions.len(),
        n_patches: sample.grid.num_patches(),
        text_entity_ranks,
        files: files.clone(),
    };
    let path = out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).at(&path)?;
    Ok(summary)
}
