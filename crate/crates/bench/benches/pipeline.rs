use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use ehrbridge::concepts::ConceptMaps;
use ehrbridge::ingest::Source;
use ehrbridge::model::{auprc, auroc};
use ehrbridge::synth::{generate_source_bundle, PlantSpec};
use ehrbridge::{run_pipeline, ExitPoint, PipelineConfig};
use rand::{Rng, SeedableRng};

fn extraction(c: &mut Criterion) {
    let src = tempfile::tempdir().unwrap();
    let spec = PlantSpec { n_stays: 100, seed: 7, ..PlantSpec::default() };
    let maps = ConceptMaps::default_maps();
    generate_source_bundle(&spec, Source::MimicLike, &src.path().join("mimic"), &maps).unwrap();

    let mut group = c.benchmark_group("extract");
    group.sample_size(10);
    group.bench_function("mimic_100_stays_pre_split", |b| {
        b.iter_batched(
            || tempfile::tempdir().unwrap(),
            |out| {
                let config = PipelineConfig {
                    source_mimic: Some(src.path().join("mimic")),
                    cohort: spec.criteria.clone(),
                    out: out.path().to_path_buf(),
                    exit_point: ExitPoint::PreSplit,
                    threads: 1,
                    ..PipelineConfig::default()
                };
                run_pipeline(&config, None).unwrap();
                out
            },
            BatchSize::PerIteration,
        )
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = rand::rngs::StdRng::seed_from_u64(11);
    let labels: Vec<bool> = (0..10_000).map(|_| rng.gen_bool(0.3)).collect();
    let scores: Vec<f64> = labels.iter().map(|&y| rng.gen::<f64>() + if y { 0.3 } else { 0.0 }).collect();
    c.bench_function("auroc_10k", |b| b.iter(|| auroc(&scores, &labels).unwrap()));
    c.bench_function("auprc_10k", |b| b.iter(|| auprc(&scores, &labels).unwrap()));
}

criterion_group!(benches, extraction, metrics);
criterion_main!(benches);
