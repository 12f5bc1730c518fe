use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dve_core::closed_set::{train_linear_probe, visual_mean_references, EmbeddingSource};
use dve_core::distill::{cosine_distill_loss, student_forward, train_student};
use dve_core::io::manifest::{load_probe_manifest, load_scan_manifest, load_student_manifest};
use dve_core::io::{
    describe_file, read_label_map, read_map3d, read_mask_map, read_segment_records, read_volume, write_label_map,
    write_map3d, write_volume, BankEntry,
};
use dve_core::map3d::{map_classify, map_query_multi};
use dve_core::{
    classify_argmax, evaluate_miou, probe_predict, Dtype, EmbeddingBank, MapBuilder, Optimizer, ProbeWeights,
    StudentParams, SuppressionConfig, TeacherVolume, TrainConfig,
};
use dve_service::{AppState, EmbedderConfig, LoadRequest, Session, SessionStore};

use crate::{Command, DtypeArg, OptimizerArg, SegmentModeArg};

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn dtype(d: DtypeArg) -> Dtype {
    match d {
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F16 => Dtype::F16,
    }
}

pub fn run(cmd: Command, out: &mut impl Write) -> Result<()> {
    match cmd {
        Command::TrainStudent {
            manifest,
            out: out_path,
            lr,
            iters,
            seed,
            hidden,
            optimizer,
            weight_decay,
            init,
            history,
        } => {
            let samples = load_student_manifest(&manifest)?;
            let Some((f, t)) = samples.first() else {
                bail!("manifest {} has no samples", manifest.display());
            };
            let init = match init {
                Some(p) => read_json::<StudentParams>(&p)?,
                None => {
                    let mut dims = vec![f.dim()];
                    dims.extend(&hidden);
                    dims.push(t.embeddings().dim());
                    StudentParams::random(&dims, seed)?
                }
            };
            let cfg = TrainConfig {
                learning_rate: lr,
                iterations: iters,
                optimizer: match optimizer {
                    OptimizerArg::Adam => Optimizer::adam(),
                    OptimizerArg::Gd => Optimizer::GradientDescent,
                },
                weight_decay,
                seed,
            };
            let (params, losses) = train_student(&samples, &cfg, init)?;
            write_json(&out_path, &params)?;
            if let Some(h) = history {
                let text: String = losses.iter().enumerate().map(|(i, l)| format!("{i} {l}\n")).collect();
                fs::write(&h, text)?;
            }
            match (losses.first(), losses.last()) {
                (Some(a), Some(b)) => writeln!(out, "iterations {}\ninitial_loss {a}\nfinal_loss {b}", losses.len())?,
                _ => writeln!(out, "iterations 0")?,
            }
        }
        Command::Loss { pred, teacher, mask } => {
            let pred = read_volume(&pred)?;
            let teacher = TeacherVolume::from_volume_and_mask(read_volume(&teacher)?, &read_mask_map(&mask)?)?;
            let r = cosine_distill_loss(&pred, &teacher)?;
            writeln!(out, "loss {}\ncovered_pixels {}", r.loss, r.covered_pixels)?;
        }
        Command::Predict {
            params,
            features,
            out: out_path,
            dtype: d,
        } => {
            let params: StudentParams = read_json(&params)?;
            let pred = student_forward(&read_volume(&features)?, &params)?;
            write_volume(&pred, dtype(d), &out_path)?;
            writeln!(out, "height {}\nwidth {}\ndim {}", pred.height(), pred.width(), pred.dim())?;
        }
        Command::Segment {
            map,
            mode,
            refs,
            probe,
            out: out_path,
        } => {
            let map = read_volume(&map)?;
            let labels = match mode {
                SegmentModeArg::Text | SegmentModeArg::Mean => {
                    let refs = refs.context("--refs is required for text and mean modes")?;
                    let bank = EmbeddingBank::load(&refs)?;
                    let out_c = classify_argmax(&map, &bank.reference_set()?)?;
                    for (i, name) in bank.names().iter().enumerate() {
                        writeln!(out, "{i} {name}")?;
                    }
                    out_c.labels
                }
                SegmentModeArg::Probe => {
                    let probe: ProbeWeights = read_json(&probe.context("--probe is required for probe mode")?)?;
                    probe_predict(&map, &probe)?
                }
            };
            write_label_map(&labels, &out_path)?;
        }
        Command::RefsMean {
            segments,
            names,
            raw,
            alpha,
            out: out_path,
        } => {
            let mut records = Vec::new();
            for p in &segments {
                let mut r = read_segment_records(p)?;
                if !raw {
                    r.refine(SuppressionConfig::new(alpha)?)?;
                }
                records.extend(r.iter().cloned());
            }
            let classes: Vec<(u16, String)> = names
                .into_iter()
                .enumerate()
                .map(|(i, n)| (i as u16, n))
                .collect();
            let source = if raw { EmbeddingSource::Raw } else { EmbeddingSource::Refined };
            let refs = visual_mean_references(&records, &classes, source)?;
            let entries = refs
                .named_rows()
                .map(|(name, row)| {
                    Ok(BankEntry {
                        name: name.to_string(),
                        vector: dve_core::EmbeddingVector::new(row.to_vec())?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            EmbeddingBank::new(refs.dim(), entries)?.save(&out_path)?;
            writeln!(out, "classes {}", refs.num_classes())?;
        }
        Command::ProbeTrain {
            manifest,
            classes,
            out: out_path,
            lr,
            iters,
            seed,
        } => {
            let samples = load_probe_manifest(&manifest)?;
            let cfg = TrainConfig {
                learning_rate: lr,
                iterations: iters,
                seed,
                ..TrainConfig::default()
            };
            let w = train_linear_probe(&samples, classes, &cfg)?;
            write_json(&out_path, &w)?;
            writeln!(out, "classes {}\ndim {}", w.classes(), w.dim())?;
        }
        Command::EvalMiou {
            pred,
            gt,
            classes,
            exclude,
        } => {
            let r = evaluate_miou(&read_label_map(&pred)?, &read_label_map(&gt)?, classes, &exclude)?;
            for (c, iou) in &r.per_class_iou {
                match iou {
                    Some(v) => writeln!(out, "{c} {v}")?,
                    None => writeln!(out, "{c} undefined")?,
                }
            }
            writeln!(out, "mean {}", r.mean_iou)?;
        }
        Command::MapBuild {
            manifest,
            cell_size,
            out: out_path,
        } => {
            let scans = load_scan_manifest(&manifest)?;
            let Some(first) = scans.first() else {
                bail!("manifest {} has no scans", manifest.display());
            };
            let mut b = MapBuilder::new(cell_size, first.embeddings.dim())?;
            for s in &scans {
                b.insert_image(&s.embeddings, &s.depth, &s.intrinsics, &s.pose)?;
            }
            let skipped = b.skipped();
            let (map, dropped) = b.freeze();
            write_map3d(&map, &out_path)?;
            writeln!(
                out,
                "cells {}\ndropped_cells {}\nskipped_observations {skipped}",
                map.len(),
                dropped.len()
            )?;
        }
        Command::MapQuery {
            map,
            query_name,
            bank,
            top,
        } => {
            let map = read_map3d(&map)?;
            let bank = EmbeddingBank::load(&bank)?;
            let queries: Vec<_> = bank.lookup(&query_name).into_iter().cloned().collect();
            if queries.is_empty() {
                bail!("no bank entry named {query_name:?}");
            }
            for (k, s) in map_query_multi(&map, &queries)?.into_iter().take(top) {
                writeln!(out, "{} {} {} {s}", k[0], k[1], k[2])?;
            }
        }
        Command::MapClassify {
            map,
            probe,
            out: out_path,
        } => {
            let map = read_map3d(&map)?;
            let probe: ProbeWeights = read_json(&probe)?;
            let text: String = map_classify(&map, &probe)?
                .into_iter()
                .map(|(k, l)| format!("{} {} {} {l}\n", k[0], k[1], k[2]))
                .collect();
            fs::write(&out_path, text)?;
            writeln!(out, "cells {}", map.len())?;
        }
        Command::Convert { input, output, dtype: d } => {
            write_volume(&read_volume(&input)?, dtype(d), &output)?;
        }
        Command::Info { file } => {
            write!(out, "{}", describe_file(&file)?)?;
        }
        Command::Serve {
            port,
            host,
            bank,
            probe,
            map,
            manifest,
            references,
        } => {
            let mut session = Session::new(EmbeddingBank::load(&bank)?, EmbedderConfig::from_env()?);
            let loads = [
                probe.map(|path| LoadRequest::Probe { path }),
                map.map(|path| LoadRequest::Map { path }),
                manifest.map(|path| LoadRequest::Manifest { path }),
                references.map(|path| LoadRequest::References { path }),
            ];
            for req in loads.into_iter().flatten() {
                session = dve_service::session::apply_load(&session, &req)?;
            }
            let state = AppState::new(SessionStore::new(session));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(dve_service::serve((host, port).into(), state))?;
        }
    }
    Ok(())
}
