//! Command implementations. Every command is a pure function of its inputs
//! and seeds; outputs are byte-identical across reruns.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fps_core::config::ExperimentConfig;
use fps_core::dti::{self, DiffusionTensor, GradientScheme};
use fps_core::error::{FpsError, Result};
use fps_core::eval::{self, CohortRecord, MaskPolicy};
use fps_core::fpsd::{self, FpsdArray};
use fps_core::kspace::{build_distance_map, perturb_image, ComplexImage, DistanceMap};
use fps_core::phantom::{
    self, apply_domain_shift, default_echoes, forward_signal, generate_phantom, DomainTag,
    SamplePair,
};
use fps_core::training::{
    self, load_checkpoint, save_checkpoint, supervised_loop, train_loop, TeacherStudentState,
};

use crate::pgm::write_pgm16;

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::parse(&fs::read_to_string(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn mix_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(stream + 1))
        .wrapping_add(0xd1b54a32d192ed03u64.wrapping_mul(index + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

// ---- gen-data ----

pub fn gen_data(config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    fs::create_dir_all(out)?;
    let roi_dir = out.join("rois");
    fs::create_dir_all(&roi_dir)?;

    let splits = [
        ("syn_train", DomainTag::Synthetic, cfg.phantom.n_train, 1u64),
        ("syn_val", DomainTag::Synthetic, cfg.phantom.n_val, 2),
        ("real_train", DomainTag::Real, cfg.phantom.n_train, 3),
        ("real_val", DomainTag::Real, cfg.phantom.n_val, 4),
    ];
    for (name, tag, count, stream) in splits {
        let mut pairs = Vec::with_capacity(count);
        for i in 0..count {
            let sample_seed = mix_seed(seed, stream, i as u64);
            let ph = generate_phantom(
                sample_seed,
                cfg.phantom.height,
                cfg.phantom.width,
                cfg.phantom.n_shapes,
                cfg.phantom.lesion_prob,
            )?;
            let clean = forward_signal(&ph.maps, &default_echoes())?;
            let input = match tag {
                DomainTag::Synthetic => clean,
                DomainTag::Real => {
                    apply_domain_shift(&clean, &cfg.shift_config(mix_seed(seed, stream + 10, i as u64)))?
                }
            };
            let id = format!("{name}_{i:05}");
            if let Some(lesion) = &ph.lesion {
                write_roi_table(&roi_dir.join(format!("{id}.tsv")), &ph.maps, lesion)?;
            }
            pairs.push(SamplePair { id, domain_tag: tag, input, target: ph.maps });
        }
        let written = phantom::write_dataset(&pairs, &out.join(name))?;
        println!("{name}: wrote {written} pairs");
    }
    Ok(())
}

fn write_roi_table(
    path: &Path,
    maps: &fps_core::phantom::ParameterMaps,
    lesion: &fps_core::phantom::LesionInfo,
) -> Result<()> {
    let mut text = format!("# label={}\nregion\tmap\tvalue\n", lesion.class);
    for &idx in &lesion.mask {
        text.push_str(&format!("lesion\tt2\t{:.12e}\n", maps.t2[idx]));
        text.push_str(&format!("lesion\tadc\t{:.12e}\n", maps.adc[idx]));
    }
    for &idx in &lesion.mirror {
        text.push_str(&format!("mirror\tadc\t{:.12e}\n", maps.adc[idx]));
    }
    fs::write(path, text)?;
    Ok(())
}

// ---- distmap ----

pub fn distmap(syn: &Path, real: &Path, out: &Path) -> Result<()> {
    let syn_pairs = phantom::read_dataset(syn)?;
    let real_pairs = phantom::read_dataset(real)?;
    let syn_inputs: Vec<ComplexImage> = syn_pairs.into_iter().map(|p| p.input).collect();
    let real_inputs: Vec<ComplexImage> = real_pairs.into_iter().map(|p| p.input).collect();
    let dmap = build_distance_map(&syn_inputs, &real_inputs)?;
    write_distance_map(out, &dmap)?;
    let peak = dmap.raw.iter().cloned().fold(0.0, f64::max);
    println!(
        "distance map {}x{} from {} syn / {} real images; max raw distance {peak:.6e}",
        dmap.height,
        dmap.width,
        dmap.corpus_sizes.0,
        dmap.corpus_sizes.1
    );
    Ok(())
}

pub fn write_distance_map(path: &Path, dmap: &DistanceMap) -> Result<()> {
    let mut values = Vec::with_capacity(2 * dmap.raw.len());
    values.extend_from_slice(&dmap.raw);
    values.extend_from_slice(&dmap.normalized);
    fpsd::write_array(path, &FpsdArray::f64(vec![2, dmap.height, dmap.width], values))?;
    let meta = format!(
        "n_syn\tn_real\n{}\t{}\n",
        dmap.corpus_sizes.0, dmap.corpus_sizes.1
    );
    fs::write(meta_path(path), meta)?;
    Ok(())
}

fn meta_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta.tsv");
    PathBuf::from(os)
}

pub fn read_distance_map(path: &Path) -> Result<DistanceMap> {
    let arr = fpsd::read_array(path)?;
    if arr.dims.len() != 3 || arr.dims[0] != 2 {
        return Err(FpsError::shape("[2, h, w]", format!("{:?}", arr.dims)));
    }
    let (h, w) = (arr.dims[1], arr.dims[2]);
    let n = h * w;
    let mut sizes = (0usize, 0usize);
    if let Ok(meta) = fs::read_to_string(meta_path(path)) {
        if let Some(line) = meta.lines().nth(1) {
            let mut fields = line.split('\t');
            sizes.0 = fields.next().and_then(|v| v.parse().ok()).unwrap_or(0);
            sizes.1 = fields.next().and_then(|v| v.parse().ok()).unwrap_or(0);
        }
    }
    DistanceMap::from_stored(h, w, arr.values[..n].to_vec(), arr.values[n..].to_vec(), sizes)
}

// ---- perturb ----

pub fn perturb(input: &Path, dmap_path: &Path, config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let dmap = read_distance_map(dmap_path)?;
    let pairs = phantom::read_dataset(input)?;
    let mut perturbed = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.into_iter().enumerate() {
        let pcfg = {
            let mut p = cfg.perturbation(mix_seed(seed, 21, i as u64));
            p.epsilon = cfg.perturb.epsilon;
            p
        };
        let shifted = perturb_image(&pair.input, &dmap, &pcfg)?;
        perturbed.push(SamplePair { input: shifted, ..pair });
    }
    let written = phantom::write_dataset(&perturbed, out)?;
    println!("wrote {written} perturbed pairs");
    Ok(())
}

// ---- train ----

pub fn train(
    config: Option<&Path>,
    seed: u64,
    out: &Path,
    iters: Option<usize>,
    resume: Option<&Path>,
    supervised: bool,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(n) = iters {
        if n > 0 {
            cfg.train.total_iterations = n;
        }
    }
    let tcfg = cfg.train_config(seed);
    if cfg.train.syn_dir.is_empty() {
        return Err(FpsError::InvalidInput("config train.syn_dir is required".into()));
    }
    let labeled = phantom::read_dataset(Path::new(&cfg.train.syn_dir))?;

    let mut state = match resume {
        Some(dir) => load_checkpoint(dir, Some(&tcfg))?,
        None => TeacherStudentState::init(&tcfg.network, seed)?,
    };

    if iters == Some(0) {
        save_checkpoint(out, &state, &tcfg)?;
        fs::write(out.join("loss_log.tsv"), training::TrainLog::default().to_tsv())?;
        println!("saved initialization checkpoint at iteration {}", state.iteration);
        return Ok(());
    }

    let log = if supervised {
        supervised_loop(&mut state, &labeled, &tcfg, Some(out))?
    } else {
        if cfg.train.real_dir.is_empty() || cfg.train.dmap.is_empty() {
            return Err(FpsError::InvalidInput(
                "config train.real_dir and train.dmap are required for adaptation".into(),
            ));
        }
        let unlabeled = phantom::read_dataset(Path::new(&cfg.train.real_dir))?;
        let dmap = read_distance_map(Path::new(&cfg.train.dmap))?;
        train_loop(&mut state, &labeled, &unlabeled, &dmap, &tcfg, Some(out))?
    };
    fs::write(out.join("loss_log.tsv"), log.to_tsv())?;
    let last = log.rows.last().map(|r| r.losses.total).unwrap_or(f64::NAN);
    println!(
        "trained to iteration {} ({} steps this run), final total loss {last:.6e}",
        state.iteration,
        log.rows.len()
    );
    Ok(())
}

// ---- eval ----

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    model: &str,
) -> Result<()> {
    let cfg = load_config(config)?;
    let state = load_checkpoint(checkpoint, None)?;
    let params = match model {
        "teacher" => &state.teacher,
        "student" => &state.student,
        other => {
            return Err(FpsError::InvalidInput(format!(
                "model must be teacher or student, got {other}"
            )))
        }
    };
    let pairs = phantom::read_dataset(data)?;
    if pairs.is_empty() {
        return Err(FpsError::InvalidInput("empty evaluation dataset".into()));
    }
    fs::create_dir_all(out)?;

    let mut metrics_tsv = String::from("id\tmap\tmae\tssim\tpsnr\tnrmse\n");
    let mut means: BTreeMap<&'static str, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, pair) in pairs.iter().enumerate() {
        let (h, w) = (pair.input.height(), pair.input.width());
        let (t2_pred, adc_pred) =
            training::infer_parameter_maps(params, &state.bn_buffers, &cfg.network, &pair.input)?;
        for (name, pred, reference) in [
            ("t2", &t2_pred, &pair.target.t2),
            ("adc", &adc_pred, &pair.target.adc),
        ] {
            let policy = if cfg.eval.display_max > cfg.eval.display_min {
                MaskPolicy::DisplayRange { lo: cfg.eval.display_min, hi: cfg.eval.display_max }
            } else {
                MaskPolicy::Full
            };
            let m = eval::image_metrics(pred, reference, h, w, policy)?;
            metrics_tsv.push_str(&format!(
                "{}\t{}\t{:.9e}\t{:.9}\t{:.6}\t{:.9e}\n",
                pair.id, name, m.mae, m.ssim, m.psnr, m.nrmse
            ));
            // per-sample tissue means feed the regression tables
            let mask: Vec<usize> =
                (0..h * w).filter(|&k| pair.target.m0[k] > 0.0).collect();
            if !mask.is_empty() {
                let pm = mask.iter().map(|&k| pred[k]).sum::<f64>() / mask.len() as f64;
                let rm = mask.iter().map(|&k| reference[k]).sum::<f64>() / mask.len() as f64;
                means.entry(name).or_default().push((rm, pm));
            }
        }
        if i < 4 {
            let lo = 0.0;
            let t2_hi = pair.target.t2.iter().cloned().fold(0.0, f64::max).max(1e-9);
            let adc_hi = pair.target.adc.iter().cloned().fold(0.0, f64::max).max(1e-9);
            write_pgm16(&out.join(format!("{}_t2_pred.pgm", pair.id)), &t2_pred, h, w, lo, t2_hi)?;
            write_pgm16(&out.join(format!("{}_t2_ref.pgm", pair.id)), &pair.target.t2, h, w, lo, t2_hi)?;
            write_pgm16(&out.join(format!("{}_adc_pred.pgm", pair.id)), &adc_pred, h, w, lo, adc_hi)?;
            write_pgm16(&out.join(format!("{}_adc_ref.pgm", pair.id)), &pair.target.adc, h, w, lo, adc_hi)?;
        }
    }
    fs::write(out.join("metrics.tsv"), &metrics_tsv)?;

    let mut regression_tsv =
        String::from("map\tslope\tintercept\tr2\tbias\tloa_low\tloa_high\tn\n");
    for (name, samples) in &means {
        if samples.len() >= 3 {
            let x: Vec<f64> = samples.iter().map(|(r, _)| *r).collect();
            let y: Vec<f64> = samples.iter().map(|(_, p)| *p).collect();
            let s = eval::regression_stats(&x, &y)?;
            regression_tsv.push_str(&format!(
                "{name}\t{:.9}\t{:.9e}\t{:.9}\t{:.9e}\t{:.9e}\t{:.9e}\t{}\n",
                s.slope,
                s.intercept,
                s.r2,
                s.bias,
                s.loa_low,
                s.loa_high,
                samples.len()
            ));
        }
    }
    fs::write(out.join("regression.tsv"), &regression_tsv)?;
    println!("evaluated {} samples with the {model} parameters", pairs.len());
    Ok(())
}

// ---- classify ----

fn read_roi_table(path: &Path) -> Result<(u8, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let text = fs::read_to_string(path)?;
    let mut label: Option<u8> = None;
    let mut lesion_t2 = Vec::new();
    let mut lesion_adc = Vec::new();
    let mut mirror_adc = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# label=") {
            label = rest.trim().parse().ok();
            continue;
        }
        if line.starts_with('#') || line.starts_with("region\t") || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(FpsError::Format {
                offset: 0,
                message: format!("{}: malformed roi line {line:?}", path.display()),
            });
        }
        let value: f64 = fields[2].parse().map_err(|_| FpsError::Format {
            offset: 0,
            message: format!("{}: bad value {:?}", path.display(), fields[2]),
        })?;
        match (fields[0], fields[1]) {
            ("lesion", "t2") => lesion_t2.push(value),
            ("lesion", "adc") => lesion_adc.push(value),
            ("mirror", "adc") => mirror_adc.push(value),
            _ => {}
        }
    }
    let label = label.ok_or_else(|| FpsError::Format {
        offset: 0,
        message: format!("{}: missing '# label=' header", path.display()),
    })?;
    Ok((label, lesion_t2, lesion_adc, mirror_adc))
}

pub fn classify(rois: &Path, out: &Path) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(rois)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "tsv"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(FpsError::InvalidInput(format!(
            "no roi tables under {}",
            rois.display()
        )));
    }
    let mut records = Vec::new();
    for path in &entries {
        let subject = path.file_stem().unwrap().to_string_lossy().to_string();
        let (label, lesion_t2, lesion_adc, mirror_adc) = read_roi_table(path)?;
        if lesion_t2.is_empty() || mirror_adc.is_empty() {
            continue;
        }
        let features = eval::histogram_features(&lesion_t2, &lesion_adc, &mirror_adc)?;
        records.push(CohortRecord { subject, label, features });
    }
    let model = eval::fit_logistic(&records)?;
    let scores: Vec<f64> = records.iter().map(|r| model.score(&r.features.as_array())).collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let roc = eval::roc_auc(&scores, &labels)?;

    fs::create_dir_all(out)?;
    let mut cohort = String::from("subject\tlabel\tt2_p75\tadc_p90\tadc_median\tdelta_adc\tscore\n");
    for (r, s) in records.iter().zip(scores.iter()) {
        let f = &r.features;
        cohort.push_str(&format!(
            "{}\t{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9}\n",
            r.subject, r.label, f.t2_p75, f.adc_p90, f.adc_median, f.delta_adc, s
        ));
    }
    fs::write(out.join("cohort.tsv"), cohort)?;
    let mut roc_tsv = String::from("fpr\ttpr\n");
    for (fpr, tpr) in &roc.points {
        roc_tsv.push_str(&format!("{fpr:.9}\t{tpr:.9}\n"));
    }
    fs::write(out.join("roc.tsv"), roc_tsv)?;
    println!("cohort of {} subjects, auc = {:.6}", records.len(), roc.auc);
    Ok(())
}

// ---- dti-fit ----

fn read_scheme(path: &Path) -> Result<GradientScheme> {
    let text = fs::read_to_string(path)?;
    let mut directions = Vec::new();
    let mut b_values = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("gx") {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse().map_err(|_| FpsError::Config {
                    line: idx + 1,
                    message: format!("bad scheme value {tok:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if fields.len() != 4 {
            return Err(FpsError::Config {
                line: idx + 1,
                message: "scheme rows are: gx gy gz b".into(),
            });
        }
        directions.push([fields[0], fields[1], fields[2]]);
        b_values.push(fields[3]);
    }
    Ok(GradientScheme { directions, b_values })
}

fn write_scheme(path: &Path, scheme: &GradientScheme) -> Result<()> {
    // default Display prints the shortest exactly round-tripping decimal
    let mut text = String::from("gx\tgy\tgz\tb\n");
    for (d, b) in scheme.directions.iter().zip(&scheme.b_values) {
        text.push_str(&format!("{}\t{}\t{}\t{}\n", d[0], d[1], d[2], b));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Smooth synthetic tensor field: a left-right diffusivity gradient with a
/// rotating principal direction.
fn demo_tensor_field(h: usize, w: usize, seed: u64) -> (Vec<DiffusionTensor>, Vec<f64>) {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::with_capacity(h * w);
    let mut s0 = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 / w as f64;
            let fy = y as f64 / h as f64;
            let angle = std::f64::consts::PI * fx;
            let (s, c) = angle.sin_cos();
            // principal direction rotates in-plane; eigenvalues vary smoothly
            let l1 = 1.2e-3 + 0.6e-3 * fy;
            let l2 = 0.4e-3 + 0.2e-3 * fx;
            let l3 = 0.3e-3;
            tensors.push(DiffusionTensor {
                dxx: l1 * c * c + l2 * s * s,
                dyy: l1 * s * s + l2 * c * c,
                dzz: l3,
                dxy: (l1 - l2) * s * c,
                dxz: 0.0,
                dyz: 0.0,
            });
            s0.push(1.0 + 0.2 * rng.random_range(-1.0..1.0));
        }
    }
    (tensors, s0)
}

pub fn dti_fit(
    dwi: Option<&Path>,
    scheme_path: Option<&Path>,
    demo: bool,
    seed: u64,
    out: &Path,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let (signals, scheme, h, w, truth) = if demo {
        let (hh, ww) = (32usize, 32usize);
        let scheme = GradientScheme::default_six(1000.0);
        let (tensors, s0) = demo_tensor_field(hh, ww, seed);
        let signals = dti::synth_dwi(&tensors, &scheme, &s0)?;
        // persist the generated stack for reproducibility
        let mut values = Vec::with_capacity(scheme.len() * hh * ww);
        for per_dir in &signals {
            values.extend_from_slice(per_dir);
        }
        fpsd::write_array(
            &out.join("dwi.fpsd"),
            &FpsdArray::f64(vec![scheme.len(), hh, ww], values),
        )?;
        write_scheme(&out.join("scheme.tsv"), &scheme)?;
        (signals, scheme, hh, ww, Some(tensors))
    } else {
        let (Some(dwi), Some(scheme_path)) = (dwi, scheme_path) else {
            return Err(FpsError::InvalidInput(
                "either pass --demo or both --dwi and --scheme".into(),
            ));
        };
        let arr = fpsd::read_array(dwi)?;
        if arr.dims.len() != 3 {
            return Err(FpsError::shape("[k, h, w]", format!("{:?}", arr.dims)));
        }
        let (k, hh, ww) = (arr.dims[0], arr.dims[1], arr.dims[2]);
        let signals: Vec<Vec<f64>> = (0..k)
            .map(|i| arr.values[i * hh * ww..(i + 1) * hh * ww].to_vec())
            .collect();
        (signals, read_scheme(scheme_path)?, hh, ww, None)
    };

    let fit = dti::fit_tensor(&signals, &scheme)?;
    let n = h * w;
    let mut fa = vec![0.0; n];
    let mut md = vec![0.0; n];
    let mut ad = vec![0.0; n];
    let mut rd = vec![0.0; n];
    let mut mask = vec![0.0; n];
    for (v, entry) in fit.tensors.iter().enumerate() {
        if let Some((tensor, _)) = entry {
            let (vals, _) = dti::eig3_symmetric(tensor)?;
            let maps = dti::dti_maps(&vals);
            fa[v] = maps.fa;
            md[v] = maps.md;
            ad[v] = maps.ad;
            rd[v] = maps.rd;
            mask[v] = 1.0;
        }
    }
    for (name, values) in [("fa", &fa), ("md", &md), ("ad", &ad), ("rd", &rd), ("mask", &mask)] {
        fpsd::write_array(
            &out.join(format!("{name}.fpsd")),
            &FpsdArray::f64(vec![h, w], values.clone()),
        )?;
    }
    let hi = |v: &Vec<f64>| v.iter().cloned().fold(0.0, f64::max).max(1e-12);
    write_pgm16(&out.join("fa.pgm"), &fa, h, w, 0.0, 1.0)?;
    write_pgm16(&out.join("md.pgm"), &md, h, w, 0.0, hi(&md))?;
    println!("fitted {} voxels ({} masked out)", n - fit.masked_out.len(), fit.masked_out.len());

    if let Some(truth) = truth {
        let mut max_rel = 0.0f64;
        for (entry, want) in fit.tensors.iter().zip(truth.iter()) {
            let (got, _) = entry.as_ref().expect("demo signals are positive");
            for (g, t) in [
                (got.dxx, want.dxx),
                (got.dyy, want.dyy),
                (got.dzz, want.dzz),
                (got.dxy, want.dxy),
                (got.dxz, want.dxz),
                (got.dyz, want.dyz),
            ] {
                max_rel = max_rel.max((g - t).abs() / t.abs().max(1e-6));
            }
        }
        println!("demo tensor recovery: max relative error {max_rel:.3e}");
    }
    Ok(())
}

// ---- report ----

fn collect_metric_files(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_metric_files(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == "metrics.tsv") {
            found.push(path);
        }
    }
    Ok(())
}

pub fn report(dir: &Path, out: Option<&Path>) -> Result<()> {
    let mut files = Vec::new();
    collect_metric_files(dir, &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(FpsError::InvalidInput(format!(
            "no metrics.tsv files under {}",
            dir.display()
        )));
    }
    // (source, map) -> per-metric values
    let mut table: BTreeMap<(String, String), [Vec<f64>; 4]> = BTreeMap::new();
    for file in &files {
        let src = file
            .parent()
            .and_then(|p| p.strip_prefix(dir).ok())
            .map(|p| p.to_string_lossy().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".to_string());
        let text = fs::read_to_string(file)?;
        for (ln, line) in text.lines().enumerate() {
            if ln == 0 || line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                continue;
            }
            let slot = table.entry((src.clone(), fields[1].to_string())).or_default();
            for (k, raw) in fields[2..].iter().enumerate() {
                if let Ok(v) = raw.parse::<f64>() {
                    if v.is_finite() {
                        slot[k].push(v);
                    }
                }
            }
        }
    }
    let mut summary = String::from("source\tmap\tmetric\tmean\tmedian\tn\n");
    let metric_names = ["mae", "ssim", "psnr", "nrmse"];
    for ((src, map), columns) in &table {
        for (k, name) in metric_names.iter().enumerate() {
            let vals = &columns[k];
            if vals.is_empty() {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let median = eval::percentile(vals, 50.0)?;
            summary.push_str(&format!(
                "{src}\t{map}\t{name}\t{mean:.9e}\t{median:.9e}\t{}\n",
                vals.len()
            ));
        }
    }
    let out_path = out
        .map(PathBuf::from)
        .unwrap_or_else(|| dir.join("summary.tsv"));
    fs::write(&out_path, &summary)?;
    print!("{summary}");
    Ok(())
}

