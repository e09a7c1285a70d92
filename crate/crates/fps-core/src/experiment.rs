//! Desk-scale experiment driver: paired corpora with a controlled domain
//! shift, the two training arms (source-only and the full adaptation loop),
//! and map-space evaluation in physical units.

use crate::error::Result;
use crate::hfsnet::NetworkConfig;
use crate::kspace::{build_distance_map, ComplexImage, DistanceMap};
use crate::phantom::{
    apply_domain_shift, default_echoes, forward_signal, generate_phantom, DomainShiftConfig,
    DomainTag, SamplePair,
};
use crate::training::{
    infer_parameter_maps, supervised_loop, train_loop, TeacherStudentState, TrainConfig,
};

fn mix(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(stream + 1))
        .wrapping_add(0xd1b54a32d192ed03u64.wrapping_mul(index + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub height: usize,
    pub width: usize,
    pub n_shapes: usize,
    pub lesion_prob: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub shift: DomainShiftConfig,
    pub seed: u64,
}

/// The four datasets of one experiment plus the offline distance map built
/// from the two training corpora.
pub struct Corpus {
    pub syn_train: Vec<SamplePair>,
    pub syn_val: Vec<SamplePair>,
    pub real_train: Vec<SamplePair>,
    pub real_val: Vec<SamplePair>,
    pub dmap: DistanceMap,
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let make = |tag: DomainTag, count: usize, stream: u64| -> Result<Vec<SamplePair>> {
        (0..count)
            .map(|i| {
                let ph = generate_phantom(
                    mix(spec.seed, stream, i as u64),
                    spec.height,
                    spec.width,
                    spec.n_shapes,
                    spec.lesion_prob,
                )?;
                let clean = forward_signal(&ph.maps, &default_echoes())?;
                let input = match tag {
                    DomainTag::Synthetic => clean,
                    DomainTag::Real => {
                        let shift = DomainShiftConfig {
                            seed: mix(spec.seed, stream + 10, i as u64),
                            ..spec.shift
                        };
                        apply_domain_shift(&clean, &shift)?
                    }
                };
                Ok(SamplePair {
                    id: format!("{}_{i:05}", tag.as_str()),
                    domain_tag: tag,
                    input,
                    target: ph.maps,
                })
            })
            .collect()
    };
    let syn_train = make(DomainTag::Synthetic, spec.n_train, 1)?;
    let syn_val = make(DomainTag::Synthetic, spec.n_val, 2)?;
    let real_train = make(DomainTag::Real, spec.n_train, 3)?;
    let real_val = make(DomainTag::Real, spec.n_val, 4)?;
    let syn_inputs: Vec<ComplexImage> = syn_train.iter().map(|p| p.input.clone()).collect();
    let real_inputs: Vec<ComplexImage> = real_train.iter().map(|p| p.input.clone()).collect();
    let dmap = build_distance_map(&syn_inputs, &real_inputs)?;
    Ok(Corpus { syn_train, syn_val, real_train, real_val, dmap })
}

/// Mean absolute error of the predicted maps in physical units (T2 seconds,
/// ADC mm^2/s), averaged over every pixel of every sample.
pub fn evaluate_mae(
    params: &crate::tensor::ParamSet,
    bn_buffers: &crate::tensor::ParamSet,
    network: &NetworkConfig,
    pairs: &[SamplePair],
) -> Result<(f64, f64)> {
    let mut t2_acc = 0.0;
    let mut adc_acc = 0.0;
    let mut count = 0usize;
    for pair in pairs {
        let (t2_pred, adc_pred) = infer_parameter_maps(params, bn_buffers, network, &pair.input)?;
        for k in 0..t2_pred.len() {
            t2_acc += (t2_pred[k] - pair.target.t2[k]).abs();
            adc_acc += (adc_pred[k] - pair.target.adc[k]).abs();
        }
        count += t2_pred.len();
    }
    Ok((t2_acc / count as f64, adc_acc / count as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct ArmResult {
    pub t2_mae: f64,
    pub adc_mae: f64,
}

/// Source-only arm: supervised training on the synthetic stream, evaluated
/// with the trained student.
pub fn run_source_only(
    corpus: &Corpus,
    cfg: &TrainConfig,
    eval_pairs: &[SamplePair],
) -> Result<(TeacherStudentState, ArmResult)> {
    let mut state = TeacherStudentState::init(&cfg.network, cfg.seed)?;
    supervised_loop(&mut state, &corpus.syn_train, cfg, None)?;
    let (t2_mae, adc_mae) =
        evaluate_mae(&state.student, &state.bn_buffers, &cfg.network, eval_pairs)?;
    Ok((state, ArmResult { t2_mae, adc_mae }))
}

/// Fresh adaptation state seeded from source-trained weights: the teacher
/// starts as an exact copy, the optimizer moments and the iteration counter
/// reset for the adaptation phase.
pub fn adaptation_state_from(source: &TeacherStudentState) -> TeacherStudentState {
    let zeros: crate::tensor::ParamSet = source
        .student
        .iter()
        .map(|(n, t)| (n.clone(), crate::tensor::Tensor::zeros(t.shape())))
        .collect();
    TeacherStudentState {
        student: source.student.clone(),
        teacher: source.student.clone(),
        bn_buffers: source.bn_buffers.clone(),
        opt_m: zeros.clone(),
        opt_v: zeros,
        iteration: 0,
        seed: source.seed,
    }
}

/// Full adaptation arm: the mean-teacher loop over both streams with the
/// distance-guided perturbation, evaluated with the trained student. When
/// `init` is given the loop starts from those source-trained weights, the
/// usual deployment of the adaptation stage; otherwise it starts from a
/// fresh initialization.
pub fn run_adaptation(
    corpus: &Corpus,
    cfg: &TrainConfig,
    init: Option<&TeacherStudentState>,
    eval_pairs: &[SamplePair],
) -> Result<(TeacherStudentState, ArmResult)> {
    let mut state = match init {
        Some(src) => adaptation_state_from(src),
        None => TeacherStudentState::init(&cfg.network, cfg.seed)?,
    };
    train_loop(&mut state, &corpus.syn_train, &corpus.real_train, &corpus.dmap, cfg, None)?;
    let (t2_mae, adc_mae) =
        evaluate_mae(&state.student, &state.bn_buffers, &cfg.network, eval_pairs)?;
    Ok((state, ArmResult { t2_mae, adc_mae }))
}
