use stkd_core::data::{
    build_sequences, generate_synthetic, ingest_events, RawEvent, SequenceConfig, Split, SyntheticConfig,
};
use stkd_core::numerics::AdamConfig;
use stkd_core::stkg::build_stkg;
use stkd_core::student::{Student, StudentConfig};
use stkd_core::teacher::{Teacher, TeacherConfig};
use stkd_core::train::{
    cache_soft_labels, distill_student, evaluate_cases, pretrain_teacher, sample_subgraphs, DistillSettings, Schedule,
    SoftSource, Variant,
};

fn schedule(epochs: usize) -> Schedule {
    Schedule {
        epochs,
        batch_size: 32,
        patience: 50,
        seed: 9,
        adam: AdamConfig { lr: 0.01, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn raw_events_to_recommendations() {
    let syn = generate_synthetic(&SyntheticConfig {
        n_users: 30,
        n_takeaways: 60,
        events_per_user: 10,
        co_purchase_pairs: 8,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let mut records: Vec<Result<RawEvent, &str>> = syn.events.iter().map(|e| Ok(e.to_raw())).collect();
    records.push(Err("truncated line"));
    let mut bad = syn.events[0].to_raw();
    bad.shop_geohash6 = "wt3mg!".into();
    records.push(Ok(bad));

    let ing = ingest_events(records).unwrap();
    assert_eq!(ing.report.malformed, 1);
    assert_eq!(ing.report.dropped_geohash, 1);
    assert_eq!(ing.report.retained, syn.events.len());

    let n = 6;
    let data = build_sequences(&ing.events, &ing.vocab, &SequenceConfig { max_len: n, ..Default::default() }).unwrap();
    let graph = build_stkg(&ing.events, &ing.vocab).unwrap();
    let v = ing.vocab.num_takeaways();

    let mut teacher =
        Teacher::new(TeacherConfig { dim: 16, seq_len: n, fanouts: vec![4, 4], ..Default::default() }, &graph, 1)
            .unwrap();
    let subgraphs = sample_subgraphs(&teacher, &data, &graph, 1).unwrap();
    let t_out = pretrain_teacher(&mut teacher, &data, &subgraphs, &schedule(6), |_| {}).unwrap();
    assert!(t_out.step_losses.first() > t_out.step_losses.last());

    let soft = cache_soft_labels(&teacher, &subgraphs, 64).unwrap();
    assert_eq!(soft.len(), data.sequences.len() * (v + 1));
    for row in soft.chunks(v + 1) {
        assert_eq!(row[0], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    let mut student = Student::new(
        StudentConfig { dim: 16, seq_len: n, ..Default::default() },
        v,
        ing.vocab.num_regions(),
        ing.vocab.num_distance_buckets(),
        2,
    )
    .unwrap();
    Variant::Full.apply(&mut student);
    let s_out = distill_student(
        &mut student,
        &data,
        Some(SoftSource::Cached(&soft)),
        None,
        &DistillSettings::default(),
        &schedule(6),
        |s, b| s.scores(b, None),
        |_| {},
    )
    .unwrap();
    assert!(s_out.best_epoch <= s_out.epochs);

    let test: Vec<_> = data.split(Split::Test).collect();
    let m = evaluate_cases(&test, &data.purchased, v, &[5, 10, 20], 100, 9, 64, |b| student.scores(b, None)).unwrap();
    assert_eq!(m.count, test.len());
    // 60 takeaways cannot supply 100 unseen negatives
    assert_eq!(m.short_pools, test.len());
    for w in m.hr.windows(2).chain(m.ndcg.windows(2)) {
        assert!(w[0] <= w[1]);
    }
    assert!(m.hr.iter().chain(&m.ndcg).all(|x| (0.0..=1.0).contains(x)));

    let last = &test[0];
    let top = student.top_k(&last.items, &last.regions, &last.distances, 5).unwrap();
    assert_eq!(top.len(), 5);
    assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
    assert!(top.iter().all(|&(item, p)| item >= 1 && item as usize <= v && p > 0.0));
}
