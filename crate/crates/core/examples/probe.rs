// Temporary end-to-end probe for the synthetic task. Not part of the
// deliverable; used to tune the desk-scale configuration.

use std::time::Instant;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfda_core::compositor::build_negative_dataset;
use sfda_core::deployment::{compute_ssm_batch, run_adaptation, AdaptationConfig};
use sfda_core::evaluation::{evaluate, predict_with_unknown, PredictionRecord};
use sfda_core::label_space::{
    ClassId, LabelSpace, NegativeClassTable, Sample, SamplePopulation, SampleRole,
};
use sfda_core::model::{ActSpec, ArchSpec, BackboneSpec, DeploymentModel, ProcurementModel};
use sfda_core::procurement::{run_procurement, stack_images, NegativeSet, ProcurementConfig};
use sfda_core::synth::{synthesize_corpus, Domain, DomainShift, SyntheticTaskSpec};

fn mean_ssm(model: &ProcurementModel, images: &[Array3<f64>]) -> f64 {
    let v = model.backbone.forward_images(&stack_images(images));
    let probs = model.probs_from_v(&v);
    let ssm = compute_ssm_batch(&probs, model.dims.num_positive).unwrap();
    ssm.iter().map(|s| s.w).sum::<f64>() / ssm.len() as f64
}

fn accuracy_report(
    deploy: &DeploymentModel,
    images: &[Array3<f64>],
    labels: &[ClassId],
    space: &LabelSpace,
) -> (f64, Option<f64>) {
    let verbose = std::env::var("PROBE_ROWS").is_ok();
    let v = deploy.frozen.backbone.forward_images(&stack_images(images));
    let logits = deploy.logits_from_v(&v);
    let records: Vec<PredictionRecord> = logits
        .rows()
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (row, &label))| PredictionRecord {
            sample_id: format!("t{i}"),
            predicted: predict_with_unknown(&row, deploy.num_positive()),
            true_label: label,
            ssm: None,
        })
        .collect();
    let report = evaluate(&records, space).unwrap();
    if verbose {
        for row in &report.rows {
            eprintln!("  row {:>8}: n={} acc={:.3}", row.label.to_string(), row.count, row.accuracy);
        }
        let mut to_unknown = 0;
        let mut cross = 0;
        for r in &records {
            if space.is_target_private(r.true_label) { continue; }
            match r.predicted {
                sfda_core::evaluation::Prediction::Unknown => to_unknown += 1,
                sfda_core::evaluation::Prediction::Class(c) if c != r.true_label => cross += 1,
                _ => {}
            }
        }
        eprintln!("  shared errors: {} to unknown, {} cross-class", to_unknown, cross);
    }
    (report.t_avg, report.t_unk)
}

fn arg<T: std::str::FromStr>(n: usize, default: T) -> T {
    std::env::args()
        .nth(n)
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let t0 = Instant::now();
    let lr: f64 = arg(1, 1e-3);
    let seed: u64 = arg(2, 7);
    let max_iter: usize = arg(3, 1200);
    let per_class: usize = arg(4, 40);
    let adapt_iters: usize = arg(5, 400);
    let hue: f64 = arg(6, 15.0);
    let adapt_lr: f64 = arg(7, 1e-4);
    let blur: f64 = arg(8, 0.5);
    let affine: f64 = arg(9, 0.05);

    let spec = SyntheticTaskSpec {
        num_classes: 9,
        images_per_class: 50,
        image_size: 32,
        shift: DomainShift {
            hue_shift_deg: hue,
            blur_sigma: blur,
            affine_jitter: affine,
        },
    };
    let source_classes: Vec<ClassId> = (0..6).collect();
    let target_classes: Vec<ClassId> = vec![0, 1, 2, 3, 6, 7, 8];
    let space = LabelSpace::new(source_classes.clone(), target_classes.clone()).unwrap();

    let (src_images, src_labels, src_ids) =
        synthesize_corpus(&spec, &source_classes, Domain::Source, seed).unwrap();
    let (tgt_images, tgt_labels, _) =
        synthesize_corpus(&spec, &target_classes, Domain::Target, seed).unwrap();
    println!("[{:?}] corpora ready", t0.elapsed());

    let table = NegativeClassTable::build(6, usize::MAX, seed).unwrap();
    let population = SamplePopulation::new(
        SampleRole::SourceShared,
        src_images
            .iter()
            .zip(&src_labels)
            .zip(&src_ids)
            .map(|((img, &l), id)| Sample {
                id: id.clone(),
                image: img.clone(),
                label: Some(l),
            })
            .collect(),
    )
    .unwrap();
    let composites = build_negative_dataset(&population, &table, per_class, seed).unwrap();
    println!("[{:?}] {} negatives", t0.elapsed(), composites.len());

    let arch = ArchSpec {
        backbone: BackboneSpec::Conv {
            input: (3, 32, 32),
            channels: vec![8, 16],
        },
        u_dim: 32,
        fs_hidden: vec![128],
        dec_hidden: vec![128],
        activation: ActSpec::Tanh,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ProcurementModel::new(&arch, 6, table.num_negative(), &mut rng).unwrap();
    let config = ProcurementConfig {
        alpha: 0.2,
        learning_rate: lr,
        max_iter,
        update_iter: 100,
        pretrain_steps: 400,
        batch_size: 32,
        seed,
        ..ProcurementConfig::default()
    };
    let neg_images: Vec<Array3<f64>> = composites.iter().map(|c| c.image.clone()).collect();
    let neg_labels: Vec<usize> = composites.iter().map(|c| c.negative_label).collect();
    let outcome = run_procurement(
        model,
        &src_images,
        &src_labels,
        &NegativeSet::Images {
            images: neg_images.clone(),
            labels: neg_labels,
        },
        &config,
    )
    .unwrap();
    println!("[{:?}] procurement done", t0.elapsed());

    // Source train accuracy.
    let v_src = outcome
        .model
        .backbone
        .forward_images(&stack_images(&src_images));
    let probs = outcome.model.probs_from_v(&v_src);
    let correct = probs
        .rows()
        .into_iter()
        .zip(&src_labels)
        .filter(|(row, &l)| sfda_core::nn::argmax(&row.view()) == l)
        .count();
    println!(
        "source train accuracy: {:.3}",
        correct as f64 / src_labels.len() as f64
    );

    // SSM populations.
    let by = |imgs: &[Array3<f64>], keep: &dyn Fn(usize) -> bool, labels: &[ClassId]| {
        imgs.iter()
            .zip(labels)
            .filter(|(_, &l)| keep(l))
            .map(|(img, _)| img.clone())
            .collect::<Vec<_>>()
    };
    let src_shared = by(&src_images, &|l| l < 4, &src_labels);
    let src_private = by(&src_images, &|l| l >= 4, &src_labels);
    let tgt_shared = by(&tgt_images, &|l| l < 4, &tgt_labels);
    let tgt_private = by(&tgt_images, &|l| l >= 6, &tgt_labels);
    let m = &outcome.model;
    println!(
        "mean w: src-shared {:.4}  src-private {:.4}  tgt-shared {:.4}  tgt-private {:.4}  negative {:.4}",
        mean_ssm(m, &src_shared),
        mean_ssm(m, &src_private),
        mean_ssm(m, &tgt_shared),
        mean_ssm(m, &tgt_private),
        mean_ssm(m, &neg_images),
    );

    // Unadapted metrics.
    let deploy0 = DeploymentModel::from_procurement(outcome.model.clone(), outcome.priors.clone());
    let (t_avg0, t_unk0) = accuracy_report(&deploy0, &tgt_images, &tgt_labels, &space);
    println!("before adaptation: T_avg {:.3} T_unk {:?}", t_avg0, t_unk0);

    let adapt_config = AdaptationConfig {
        iterations: adapt_iters,
        learning_rate: adapt_lr,
        beta: 0.1,
        batch_size: 32,
        seed,
    };
    let mut deploy_cur = DeploymentModel::from_procurement(outcome.model.clone(), outcome.priors.clone());
    let chunk = 50;
    let mut done = 0;
    while done < adapt_iters {
        let step_cfg = AdaptationConfig {
            iterations: chunk.min(adapt_iters - done),
            learning_rate: adapt_lr,
            beta: 0.1,
            batch_size: 32,
            seed: seed + done as u64,
        };
        let out = run_adaptation(deploy_cur, &tgt_images, &step_cfg).unwrap();
        deploy_cur = out.model;
        done += chunk;
        let (ta, tu) = accuracy_report(&deploy_cur, &tgt_images, &tgt_labels, &space);
        println!("  adapt@{done}: T_avg {:.3} T_unk {:?}", ta, tu);
    }
    println!("total: {:?}", t0.elapsed());
}
