use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use taskseq::data::{generate_dataset, io::DatasetMetadata, GenerationPlan, PadKind};
use taskseq::models::{Architecture, Network};
use taskseq::par;
use taskseq::streaming::replay_all;
use taskseq::training::{desk_preset, pad_assemblies, score, Sample};

fn bench(c: &mut Criterion) {
    let mut plan = GenerationPlan::standard(1, 1);
    plan.operators.truncate(2);
    plan.assemblies.truncate(2);
    let ds = generate_dataset(&plan, 3).expect("dataset");
    let meta = DatasetMetadata::from_dataset(&ds, None);
    let ids: Vec<u32> = ds.recordings.iter().map(|r| r.assembly_id).collect();
    let t_max = ds.t_max();
    let padded = pad_assemblies(&ds, &ids, PadKind::Zero, t_max, 0).expect("pad");
    let samples: Vec<Sample> = padded.iter().map(|p| Sample::from_padded(p, false)).collect();
    let recs: Vec<_> = ds
        .recordings
        .iter()
        .map(|r| (r, meta.assembly(r.assembly_id)))
        .collect();

    let mut group = c.benchmark_group("parallel_vs_sequential");
    group.sample_size(10);
    for arch in Architecture::ALL {
        let cfg = desk_preset(arch, PadKind::Zero);
        let net = Network::build(&cfg.network, 1).expect("network");
        for (label, jobs) in [("sequential", 1), ("parallel", 0)] {
            group.bench_with_input(
                BenchmarkId::new(format!("score/{}", arch.name()), label),
                &jobs,
                |b, &jobs| b.iter(|| par::with_jobs(jobs, || score(&net, &samples).expect("score"))),
            );
        }
        let recs = &recs[..1];
        for (label, jobs) in [("sequential", 1), ("parallel", 0)] {
            group.bench_with_input(
                BenchmarkId::new(format!("replay/{}", arch.name()), label),
                &jobs,
                |b, &jobs| b.iter(|| par::with_jobs(jobs, || replay_all(recs, &net, t_max, false).expect("replay"))),
            );
        }
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
