//! End-to-end behaviour of training and evaluation on a small dataset.

mod common;

use std::sync::OnceLock;

use lpi::continual::{Direction, Evaluator, GalleryScope, IdentityMode, Variant};
use lpi::io::report::summarize;
use lpi::io::{generate_dataset, Dataset};
use lpi::RunState;

fn fixture() -> &'static (Dataset, RunState) {
    static CELL: OnceLock<(Dataset, RunState)> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = generate_dataset(&common::small_spec()).unwrap();
        let mut run = RunState::pretrain(&common::small_config(Variant::lpi_p()), &data).unwrap();
        run.train_until(&data, None, |_| Ok(())).unwrap();
        (data, run)
    })
}

#[test]
fn correctly_identified_queries_rank_as_under_the_oracle() {
    let (data, run) = fixture();
    let tests = data.test_sets();
    let mut ev = Evaluator::new(&run.backbone, &tests, GalleryScope::PerTask);
    let mut agreed = 0;
    for stage in 1..=run.stage() {
        for task in 0..stage {
            for dir in [Direction::ImageToText, Direction::TextToImage] {
                let oracle = ev.query_rankings(&run.pool, stage, task, dir, IdentityMode::Oracle).unwrap();
                let predicted = ev.query_rankings(&run.pool, stage, task, dir, IdentityMode::Predicted).unwrap();
                assert!(oracle.chosen.iter().all(|c| *c == Some(task)));
                for q in 0..predicted.rankings.len() {
                    if predicted.chosen[q] == Some(task) {
                        assert_eq!(predicted.rankings[q], oracle.rankings[q], "stage {stage} task {task} query {q}");
                        agreed += 1;
                    }
                }
            }
        }
    }
    assert!(agreed > 0);
}

#[test]
fn record_grid_covers_every_stage_and_task() {
    let (data, run) = fixture();
    let records = run.evaluate(data, IdentityMode::Predicted).unwrap();
    let k = run.stage();
    assert_eq!(records.len(), k * (k + 1));
    for r in &records {
        assert!(r.task < r.stage && r.stage <= k);
        assert!(0.0 <= r.r1 && r.r1 <= r.r5 && r.r5 <= r.r10 && r.r10 <= 100.0, "{r:?}");
    }
}

#[test]
fn union_gallery_matches_per_task_at_the_first_stage() {
    let (data, run) = fixture();
    let tests = data.test_sets();
    let mut per_task = Evaluator::new(&run.backbone, &tests, GalleryScope::PerTask);
    let mut union = Evaluator::new(&run.backbone, &tests, GalleryScope::Union);
    let a = per_task.evaluate_stage(&run.pool, 1, IdentityMode::Oracle).unwrap();
    let b = union.evaluate_stage(&run.pool, 1, IdentityMode::Oracle).unwrap();
    assert_eq!(a, b);

    let last = union.evaluate_stage(&run.pool, run.stage(), IdentityMode::Oracle).unwrap();
    let gallery = union.query_rankings(&run.pool, run.stage(), 0, Direction::ImageToText, IdentityMode::Oracle).unwrap();
    let total: usize = tests.iter().map(|t| t.len()).sum();
    assert!(gallery.rankings.iter().all(|r| r.len() == total));
    assert_eq!(last.len(), 2 * run.stage());
}

#[test]
fn frozen_backbone_baseline_never_forgets() {
    let (data, run) = fixture();
    let records = run.evaluate(data, IdentityMode::None).unwrap();
    let summary = summarize(&records).unwrap();
    for t in &summary.modes[0].tasks {
        assert_eq!(t.values.forgetting, 0.0, "task {} {}", t.task, t.direction);
    }
}

#[test]
fn oracle_prompts_never_forget() {
    let (data, run) = fixture();
    let summary = summarize(&run.evaluate(data, IdentityMode::Oracle).unwrap()).unwrap();
    assert!(summary.modes[0].tasks.iter().all(|t| t.values.f1 == 0.0 && t.values.f10 == 0.0));
}

#[test]
fn evaluation_is_repeatable() {
    let (data, run) = fixture();
    let a = run.evaluate(data, IdentityMode::Predicted).unwrap();
    let b = run.evaluate(data, IdentityMode::Predicted).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_pool_is_reported() {
    let (data, run) = fixture();
    let bare = RunState::with_backbone(&run.config, run.backbone.clone()).unwrap();
    let tests = data.test_sets();
    let mut ev = Evaluator::new(&bare.backbone, &tests, GalleryScope::PerTask);
    let err = ev.query_rankings(&bare.pool, 1, 0, Direction::ImageToText, IdentityMode::Oracle).unwrap_err();
    assert!(matches!(err, lpi::Error::EmptyPool), "{err}");
}
