use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::ppm::{self, Canvas, Rgb, CELL, PANEL_GAP};
use super::{CliError, CommonArgs, ExplainArgs, FitAlphaArgs, KernelArgs, MatchKindArg, NormsArgs, PartsArgs, PoolArgs, Reporter, SynthArgs, TrainArgs, write_file};
use crate::alphapool::{alpha_grid_search, default_alpha_grid, fit_alpha, FitHyper};
use crate::dualclf::{default_lambda, train_dual, BackendTag, DualClassifier};
use crate::featio::{synth_dataset, Dataset, DatasetManifest, FeatureMap, LocationRef, ManifestEntry, SynthSpec};
use crate::influence::{part_contributions, top_training_regions, InfluenceReport, Loc, PartSet};
use crate::kernelview::{best_l2_matches, descriptors, gram_from_descriptors, kernel_row, norm_map_pair, thresholded_matches, GramBackend, MatchSet, NormGrid};
use crate::sketch::make_plan;

fn load(path: &Path) -> Result<(DatasetManifest, Dataset), CliError> {
    let m = DatasetManifest::read(path)?;
    let d = m.load()?;
    if d.is_empty() {
        return Err(CliError::File(format!("{}: manifest has no entries", path.display())));
    }
    Ok((m, d))
}

fn dataset_dim(d: &Dataset, path: &Path) -> Result<usize, CliError> {
    let dim = d.maps[0].dim();
    if let Some(i) = d.maps.iter().position(|m| m.dim() != dim) {
        return Err(CliError::File(format!("{}: entry {i} has D={}, expected D={dim}", path.display(), d.maps[i].dim())));
    }
    Ok(dim)
}

fn backend(c: &CommonArgs, dim: usize) -> Result<(GramBackend, BackendTag), CliError> {
    Ok(match c.sketch_dim {
        None => (GramBackend::Exact, BackendTag::Exact),
        Some(d) => (
            GramBackend::Sketch(make_plan(dim, d, c.seed)?),
            BackendTag::Sketch { sketch_dim: d, seed: c.seed },
        ),
    })
}

/// File-name-safe form of an image id.
fn file_stem(id: &str) -> String {
    let s: String = id.chars().map(|ch| if ch.is_ascii_alphanumeric() || "-_.".contains(ch) { ch } else { '_' }).collect();
    if s.is_empty() || s.starts_with('.') {
        format!("_{s}")
    } else {
        s
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn synth(c: &CommonArgs, a: &SynthArgs, rep: &Reporter) -> Result<(), CliError> {
    let spec = SynthSpec {
        mode: a.mode.into(),
        classes: a.classes,
        images_per_class: a.images_per_class,
        height: a.height,
        width: a.width,
        dim: a.dim,
        discriminative_fraction: a.fraction,
        noise_scale: a.noise,
        signal: a.signal,
        clutter: a.clutter,
        clutter_fraction: a.clutter_fraction,
        object: a.object,
        seed: c.seed,
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let ds = synth_dataset(&spec)?;
    let path = ds.write_to(&c.out, "dataset.manifest")?;
    rep.emit(
        "manifest",
        format!("wrote {} images to {}", ds.dataset.len(), path.display()),
        json!({"path": path, "images": ds.dataset.len(), "classes": spec.classes}),
    );
    if a.split {
        let (train, test) = ds.split_alternate();
        for (name, part) in [("train.manifest", &train), ("test.manifest", &test)] {
            let p = c.out.join(name);
            part.manifest.write(&p)?;
            rep.emit("manifest", format!("wrote {} images to {}", part.dataset.len(), p.display()), json!({"path": p, "images": part.dataset.len()}));
        }
    }
    Ok(())
}

pub fn pool(c: &CommonArgs, a: &PoolArgs, rep: &Reporter) -> Result<(), CliError> {
    let (manifest, data) = load(&a.manifest)?;
    let dim = dataset_dim(&data, &a.manifest)?;
    let (be, _) = backend(c, dim)?;
    let desc = descriptors(&data.maps, &c.pool_config(), &be)?;
    let dir = c.out.join("descriptors");
    let mut entries = Vec::with_capacity(desc.len());
    for (k, (fm, v)) in data.maps.iter().zip(&desc).enumerate() {
        let rel = PathBuf::from("descriptors").join(format!("{}.fmap", file_stem(fm.image_id())));
        if entries.iter().any(|e: &ManifestEntry| e.fmap == rel) {
            return Err(CliError::File(format!("entry {k}: image id {:?} collides with an earlier descriptor file", fm.image_id())));
        }
        let out = FeatureMap::single(fm.image_id(), 1, 1, v.len(), v.clone())?;
        write_file(&c.out.join(&rel), &out.to_bytes())?;
        entries.push(ManifestEntry {
            fmap: rel,
            label: data.labels[k],
            mask: None,
        });
        rep.emit("descriptor", format!("{}\t{} values", fm.image_id(), v.len()), json!({"image_id": fm.image_id(), "length": v.len()}));
    }
    let out_manifest = DatasetManifest {
        class_names: manifest.class_names.clone(),
        entries,
        base_dir: c.out.clone(),
    };
    let p = c.out.join("descriptors.manifest");
    out_manifest.write(&p)?;
    rep.emit("summary", format!("pooled {} images into {}", desc.len(), dir.display()), json!({"images": desc.len(), "manifest": p}));
    Ok(())
}

pub fn kernel(c: &CommonArgs, a: &KernelArgs, rep: &Reporter) -> Result<(), CliError> {
    let (_, cols) = load(&a.manifest)?;
    let dim = dataset_dim(&cols, &a.manifest)?;
    let rows = match &a.against {
        Some(p) => {
            let (_, r) = load(p)?;
            let rd = dataset_dim(&r, p)?;
            if rd != dim {
                return Err(CliError::File(format!("{} has D={rd} but {} has D={dim}", p.display(), a.manifest.display())));
            }
            Some(r)
        }
        None => None,
    };
    let (be, _) = backend(c, dim)?;
    let cfg = c.pool_config();
    let col_desc = descriptors(&cols.maps, &cfg, &be)?;
    let (row_ids, values): (Vec<&str>, Vec<Vec<f64>>) = match &rows {
        None => {
            let k = gram_from_descriptors(&col_desc);
            (cols.maps.iter().map(|m| m.image_id()).collect(), (0..k.n).map(|i| k.row(i).to_vec()).collect())
        }
        Some(r) => {
            let rd = descriptors(&r.maps, &cfg, &be)?;
            (r.maps.iter().map(|m| m.image_id()).collect(), rd.iter().map(|q| kernel_row(q, &col_desc)).collect())
        }
    };
    let mut text = String::from("image");
    for m in &cols.maps {
        text.push('\t');
        text.push_str(m.image_id());
    }
    text.push('\n');
    for (id, row) in row_ids.iter().zip(&values) {
        text.push_str(id);
        for v in row {
            text.push('\t');
            text.push_str(&num(*v));
        }
        text.push('\n');
        rep.emit("kernel_row", format!("{id}: {} entries", row.len()), json!({"image_id": id, "values": row}));
    }
    let p = c.out.join("kernel.tsv");
    write_file(&p, text.as_bytes())?;
    rep.emit("summary", format!("wrote {}x{} kernel to {}", values.len(), cols.len(), p.display()), json!({"rows": values.len(), "cols": cols.len(), "path": p}));
    Ok(())
}

pub fn train(c: &CommonArgs, a: &TrainArgs, rep: &Reporter) -> Result<(), CliError> {
    let (manifest, data) = load(&a.manifest)?;
    let dim = dataset_dim(&data, &a.manifest)?;
    let (be, tag) = backend(c, dim)?;
    let cfg = c.pool_config();
    let desc = descriptors(&data.maps, &cfg, &be)?;
    let k = gram_from_descriptors(&desc);
    let lambda = a.lambda.unwrap_or_else(|| default_lambda(&k));
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(CliError::Usage(format!("--lambda must be positive, got {lambda}")));
    }
    let mut clf = train_dual(&k, &data.labels, manifest.class_names.len(), lambda)?;
    clf.class_names = manifest.class_names.clone();
    clf.train_ids = data.maps.iter().map(|m| m.image_id().to_string()).collect();
    clf.backend = tag;
    clf.pool = cfg;
    let correct = (0..k.n).filter(|&i| clf.predict(k.row(i)).ok() == Some(data.labels[i])).count();
    let path = a.classifier.clone().unwrap_or_else(|| c.out.join("classifier.json"));
    write_file(&path, (clf.to_json() + "\n").as_bytes())?;
    let acc = correct as f64 / k.n as f64;
    rep.emit(
        "classifier",
        format!("trained {} classes on {} images, lambda {lambda}, training accuracy {:.4}; wrote {}", clf.class_count(), k.n, acc, path.display()),
        json!({"path": path, "classes": clf.class_count(), "images": k.n, "lambda": lambda, "train_accuracy": acc}),
    );
    Ok(())
}

fn read_classifier(path: &Path) -> Result<DualClassifier, CliError> {
    if !path.is_file() {
        return Err(CliError::File(format!("classifier not found: {}", path.display())));
    }
    DualClassifier::read(path).map_err(|e| CliError::File(format!("{}: {e}", path.display())))
}

fn check_train_ids(clf: &DualClassifier, train: &Dataset) -> Result<(), CliError> {
    if clf.train_count() != train.len() {
        return Err(CliError::File(format!("classifier was trained on {} images, training manifest has {}", clf.train_count(), train.len())));
    }
    for (k, (id, m)) in clf.train_ids.iter().zip(&train.maps).enumerate() {
        if id != m.image_id() {
            return Err(CliError::File(format!("training entry {k} is {:?}, classifier expects {id:?}", m.image_id())));
        }
    }
    Ok(())
}

fn resolve_class(clf: &DualClassifier, spec: &str) -> Result<usize, CliError> {
    if let Some(c) = clf.class_names.iter().position(|n| n == spec) {
        return Ok(c);
    }
    match spec.parse::<usize>() {
        Ok(c) if c < clf.class_count() => Ok(c),
        _ => Err(CliError::Usage(format!("unknown class {spec:?}"))),
    }
}

fn report_text(r: &InfluenceReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "test {}  class {} ({})  score {:.6}", r.test_id, r.class, r.class_name, r.score);
    if r.degenerate {
        let _ = writeln!(s, "  no positively weighted training image contributes; percentages unavailable");
    }
    if let Some(g) = &r.top_region {
        let _ = writeln!(
            s,
            "  top region: {} s{}({},{}) -> test s{}({},{})  {:.1}%",
            g.train_id,
            g.train_loc.scale, g.train_loc.row, g.train_loc.col, g.test_loc.scale, g.test_loc.row, g.test_loc.col, g.percent
        );
    }
    for img in &r.images {
        let _ = write!(s, "  #{} {}  beta {:.4e}  aggregate {:.4e}", img.rank, img.train_id, img.beta, img.aggregate);
        if let Some(p) = img.share {
            let _ = write!(s, "  share {p:.1}%");
        }
        if let Some(g) = &img.best_region {
            let _ = write!(
                s,
                "  region train s{}({},{}) -> test s{}({},{})  {:.1}%  [{} triplets]",
                g.train_loc.scale, g.train_loc.row, g.train_loc.col, g.test_loc.scale, g.test_loc.row, g.test_loc.col, g.percent, g.members
            );
        }
        s.push('\n');
    }
    if let Some(n) = &r.note {
        let _ = writeln!(s, "  note: {n}");
    }
    s
}

fn loc_center(grids: &[NormGrid], origin: (usize, usize), l: &Loc) -> (i64, i64) {
    let (x, y) = ppm::cell_rect(grids, origin, l.scale, l.row, l.col);
    ((x + CELL / 2) as i64, (y + CELL / 2) as i64)
}

fn outline_loc(canvas: &mut Canvas, grids: &[NormGrid], origin: (usize, usize), l: &Loc, color: Rgb) {
    let (x, y) = ppm::cell_rect(grids, origin, l.scale, l.row, l.col);
    canvas.outline(x, y, CELL, CELL, color);
}

/// Overlay colour for a region: brighter green for a larger share.
fn share_color(percent: f64) -> Rgb {
    let t = (percent / 100.0).clamp(0.0, 1.0);
    [0, (96.0 + 159.0 * t).round() as u8, (255.0 * (1.0 - t)).round() as u8]
}

/// Test norm map on the left, ranked training images to the right, each best
/// region outlined in both and joined by a line.
fn overlay(test: &FeatureMap, train: &[FeatureMap], r: &InfluenceReport) -> Canvas {
    let panels: Vec<(Vec<NormGrid>, Vec<NormGrid>)> = r
        .images
        .iter()
        .map(|img| {
            let (t, k) = norm_map_pair(test, &train[img.train_index]);
            (t.scales, k.scales)
        })
        .collect();
    let test_grids = match panels.first() {
        Some((t, _)) => t.clone(),
        None => crate::kernelview::norm_map(test).scales,
    };
    let (tw, th) = ppm::stack_size(&test_grids);
    let mut width = PANEL_GAP + tw;
    let mut height = th;
    for (_, k) in &panels {
        let (w, h) = ppm::stack_size(k);
        width += PANEL_GAP + w;
        height = height.max(h);
    }
    let mut canvas = Canvas::new(width + PANEL_GAP, height + 2 * PANEL_GAP);
    let test_origin = (PANEL_GAP, PANEL_GAP);
    ppm::draw_stack(&mut canvas, &test_grids, test_origin);
    let mut x = PANEL_GAP + tw + PANEL_GAP;
    let mut links = Vec::new();
    for (img, (_, k)) in r.images.iter().zip(&panels) {
        let origin = (x, PANEL_GAP);
        ppm::draw_stack(&mut canvas, k, origin);
        if let Some(g) = &img.best_region {
            let color = share_color(g.percent);
            outline_loc(&mut canvas, k, origin, &g.train_loc, color);
            outline_loc(&mut canvas, &test_grids, test_origin, &g.test_loc, color);
            links.push((loc_center(&test_grids, test_origin, &g.test_loc), loc_center(k, origin, &g.train_loc), color));
        }
        x += ppm::stack_size(k).0 + PANEL_GAP;
    }
    for (a, b, color) in links {
        canvas.line(a, b, color);
    }
    canvas
}

pub fn explain(_c: &CommonArgs, a: &ExplainArgs, rep: &Reporter) -> Result<(), CliError> {
    let clf = read_classifier(&a.classifier)?;
    if !(a.radius >= 0.0 && a.radius.is_finite()) {
        return Err(CliError::Usage(format!("--radius must be a nonnegative number, got {}", a.radius)));
    }
    let (_, train) = load(&a.train_manifest)?;
    let (_, test) = load(&a.test_manifest)?;
    check_train_ids(&clf, &train)?;
    let forced = a.class.as_deref().map(|s| resolve_class(&clf, s)).transpose()?;
    let cfg = clf.pool;
    let mut jsonl = String::new();
    let mut text = String::new();
    let out = &_c.out;
    for (t, fm) in test.maps.iter().enumerate() {
        let class = match forced {
            Some(c) => c,
            None if test.labels[t] < clf.class_count() => test.labels[t],
            None => return Err(CliError::File(format!("test entry {t} has label {} outside the classifier's classes", test.labels[t]))),
        };
        let r = top_training_regions(&clf, class, &train.maps, fm, &cfg, a.images, a.radius, a.force)?;
        let line = serde_json::to_string(&r).expect("report serializes");
        jsonl.push_str(&line);
        jsonl.push('\n');
        let block = report_text(&r);
        text.push_str(&block);
        let ov = out.join("overlays").join(format!("{}.ppm", file_stem(fm.image_id())));
        write_file(&ov, &overlay(fm, &train.maps, &r).to_bytes())?;
        rep.emit("report", block.trim_end(), serde_json::to_value(&r).expect("report serializes"));
    }
    write_file(&out.join("explain.jsonl"), jsonl.as_bytes())?;
    write_file(&out.join("explain.txt"), text.as_bytes())?;
    Ok(())
}

pub fn parts(c: &CommonArgs, a: &PartsArgs, rep: &Reporter) -> Result<(), CliError> {
    let clf = read_classifier(&a.classifier)?;
    let (_, train) = load(&a.train_manifest)?;
    let (_, test) = load(&a.test_manifest)?;
    check_train_ids(&clf, &train)?;
    train.require_masks()?;
    test.require_masks()?;
    let m = part_contributions(
        PartSet {
            maps: &test.maps,
            masks: &test.masks,
        },
        &test.labels,
        PartSet {
            maps: &train.maps,
            masks: &train.masks,
        },
        &clf,
        &clf.pool,
        a.top_n,
        !a.unsquared,
        a.force,
    )?;
    let mut s = String::from("test\\train");
    for n in &m.part_names {
        s.push('\t');
        s.push_str(n);
    }
    s.push('\n');
    let p = m.size();
    for (r, name) in m.part_names.iter().enumerate() {
        s.push_str(name);
        for v in &m.values[r * p..(r + 1) * p] {
            s.push('\t');
            s.push_str(&num(*v));
        }
        s.push('\n');
    }
    write_file(&c.out.join("parts.tsv"), s.as_bytes())?;
    rep.emit("parts", s.trim_end(), serde_json::to_value(&m).expect("matrix serializes"));
    Ok(())
}

fn pick<'a>(data: &'a Dataset, key: &str) -> Result<&'a FeatureMap, CliError> {
    if let Some(m) = data.maps.iter().find(|m| m.image_id() == key) {
        return Ok(m);
    }
    match key.parse::<usize>() {
        Ok(i) if i < data.len() => Ok(&data.maps[i]),
        _ => Err(CliError::Usage(format!("no image {key:?} in the manifest"))),
    }
}

fn heat_panel(grids: &[NormGrid]) -> Canvas {
    let (w, h) = ppm::stack_size(grids);
    let mut canvas = Canvas::new(w + 2 * PANEL_GAP, h + 2 * PANEL_GAP);
    ppm::draw_stack(&mut canvas, grids, (PANEL_GAP, PANEL_GAP));
    canvas
}

fn to_loc(r: LocationRef, fm: &FeatureMap) -> Loc {
    let (y, x) = r.normalized(fm.shape_of(r.scale));
    Loc {
        scale: r.scale,
        row: r.row,
        col: r.col,
        y,
        x,
    }
}

pub fn norms(c: &CommonArgs, a: &NormsArgs, rep: &Reporter) -> Result<(), CliError> {
    let (_, data) = load(&a.manifest)?;
    let left = pick(&data, &a.left)?;
    let right = pick(&data, &a.right)?;
    if left.dim() != right.dim() {
        return Err(CliError::File(format!("{} has D={} but {} has D={}", left.image_id(), left.dim(), right.image_id(), right.dim())));
    }
    if !(a.threshold.is_finite()) {
        return Err(CliError::Usage("--threshold must be finite".into()));
    }
    let (nl, nr) = norm_map_pair(left, right);
    let (yl, yr) = (left.vectors(), right.vectors());
    let set: MatchSet = match a.kind {
        MatchKindArg::L2 => best_l2_matches(&yl, &yr, a.top_m)?,
        MatchKindArg::Inner => thresholded_matches(&yl, &yr, a.threshold, false)?,
        MatchKindArg::InnerSquared => thresholded_matches(&yl, &yr, a.threshold, true)?,
    };
    write_file(&c.out.join("norms_left.ppm"), &heat_panel(&nl.scales).to_bytes())?;
    write_file(&c.out.join("norms_right.ppm"), &heat_panel(&nr.scales).to_bytes())?;

    let (lw, lh) = ppm::stack_size(&nl.scales);
    let (rw, rh) = ppm::stack_size(&nr.scales);
    let mut canvas = Canvas::new(lw + rw + 3 * PANEL_GAP, lh.max(rh) + 2 * PANEL_GAP);
    let lo = (PANEL_GAP, PANEL_GAP);
    let ro = (2 * PANEL_GAP + lw, PANEL_GAP);
    ppm::draw_stack(&mut canvas, &nl.scales, lo);
    ppm::draw_stack(&mut canvas, &nr.scales, ro);
    let lrefs = left.location_refs();
    let rrefs = right.location_refs();
    let mut s = String::new();
    let _ = writeln!(s, "left {}  right {}  kind {:?}  matches {}", left.image_id(), right.image_id(), set.kind, set.matches.len());
    if set.degenerate {
        let _ = writeln!(s, "no positive maximum; nothing matched");
    }
    for m in &set.matches {
        let li = to_loc(lrefs[m.i], left);
        let rj = to_loc(rrefs[m.j], right);
        let v = (55.0 + 200.0 * m.strength.clamp(0.0, 1.0)).round() as u8;
        canvas.line(loc_center(&nl.scales, lo, &li), loc_center(&nr.scales, ro, &rj), [v, v, 0]);
        let _ = writeln!(s, "s{}({},{}) -> s{}({},{})  {:.6}", li.scale, li.row, li.col, rj.scale, rj.row, rj.col, m.strength);
    }
    write_file(&c.out.join("matches.ppm"), &canvas.to_bytes())?;
    write_file(&c.out.join("norms.txt"), s.as_bytes())?;
    rep.emit(
        "matches",
        s.trim_end(),
        json!({"left": left.image_id(), "right": right.image_id(), "left_norms": nl, "right_norms": nr, "matches": set}),
    );
    Ok(())
}

pub fn fit_alpha_cmd(c: &CommonArgs, a: &FitAlphaArgs, rep: &Reporter) -> Result<(), CliError> {
    let (_, train) = load(&a.train_manifest)?;
    let (_, valid) = load(&a.valid_manifest)?;
    let hyper = FitHyper {
        learning_rate: a.lr,
        alpha_learning_rate: a.alpha_lr,
        epochs: a.epochs,
        seed: c.seed,
        lambda: a.lambda,
        alpha_init: c.alpha,
    };
    let cfg = c.pool_config();
    let fit = fit_alpha(&train, &valid, &cfg, &hyper)?;
    let grid = if a.grid { Some(alpha_grid_search(&train, &valid, &cfg, &hyper, &default_alpha_grid())?) } else { None };
    let alpha = *fit.alpha_trajectory.last().expect("trajectory starts with the initial alpha");
    let summary = json!({
        "hyper": hyper,
        "alpha": alpha,
        "train_accuracy": fit.train_accuracy,
        "valid_accuracy": fit.valid_accuracy,
        "valid_loss": fit.valid_loss,
        "head": fit.head,
        "grid": grid,
    });
    write_file(&c.out.join("fit_alpha.json"), (serde_json::to_string_pretty(&summary).expect("json") + "\n").as_bytes())?;
    let mut s = String::from("epoch\talpha\tloss\n");
    for (e, al) in fit.alpha_trajectory.iter().enumerate() {
        // loss of the epoch that starts at this alpha
        let loss = fit.loss_trajectory.get(e).map(|l| num(*l)).unwrap_or_else(|| "-".into());
        let _ = writeln!(s, "{e}\t{}\t{loss}", num(*al));
    }
    write_file(&c.out.join("alpha_trajectory.tsv"), s.as_bytes())?;
    let mut text = format!("alpha {:.4} after {} epochs; valid accuracy {:.4}, loss {:.4}", alpha, a.epochs, fit.valid_accuracy, fit.valid_loss);
    if let Some(g) = &grid {
        let _ = write!(text, "; grid best alpha {}", g.best_alpha);
    }
    rep.emit("fit", text, summary);
    Ok(())
}
