mod common;

use std::fs;
use std::sync::{Arc, Mutex};

use proptest::prelude::*;
use recast_core::protocol::WorkerStage;
use recast_core::{ArtifactId, Error, ENGINE_VERSION};
use recast_engine::pipeline::{run_config, CacheEntry, NodeInput};
use recast_engine::runlog::read_run_log;
use recast_engine::{cache_key, plan, run, verify_cache, EventKind, RunError, RunEvent, RunOptions, StageKind, StagePlan,
    WorkerPool};

use common::*;

fn sorted(mut v: Vec<StageKind>) -> Vec<StageKind> {
    v.sort();
    v
}

#[test]
fn plan_orders_stages() {
    let fx = fixture();
    let p = plan(&fx.config, &fx.ws).unwrap();
    let order = p.stage_order().unwrap();
    assert_eq!(order.len(), 7);
    assert_eq!(order[0], StageKind::SegmentTrack);
    assert_eq!(order[6], StageKind::EdgeRefine);
    let pos = |s| order.iter().position(|&x| x == s).unwrap();
    assert!(pos(StageKind::Remove) < pos(StageKind::Composite));
    assert!(pos(StageKind::PoseEstimate) < pos(StageKind::Animate));
    assert!(pos(StageKind::Animate) < pos(StageKind::Composite));
    assert!(pos(StageKind::Composite) < pos(StageKind::Harmonize));
}

#[test]
fn without_removal_composite_reads_the_scene() {
    let mut fx = fixture();
    fx.config.removal_enabled = false;
    let p = plan(&fx.config, &fx.ws).unwrap();
    assert!(p.node(StageKind::Remove).is_none());
    let comp = p.node(StageKind::Composite).unwrap();
    assert!(matches!(&comp.inputs[0], NodeInput::Artifact { name, .. } if name == "scene"));
}

#[test]
fn cyclic_plan_is_rejected() {
    let fx = fixture();
    let p = plan(&fx.config, &fx.ws).unwrap();
    let mut nodes = p.nodes.clone();
    nodes[0].inputs.push(NodeInput::Node {
        stage: StageKind::EdgeRefine,
    });
    let err = StagePlan::new(nodes, p.context.clone()).unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("cycle")), "{err}");
}

#[test]
fn composite_with_wrong_inputs_is_rejected() {
    let fx = fixture();
    let p = plan(&fx.config, &fx.ws).unwrap();
    let mut nodes = p.nodes.clone();
    let i = nodes.iter().position(|n| n.stage == StageKind::Composite).unwrap();
    nodes[i].inputs.reverse();
    assert!(matches!(StagePlan::new(nodes, p.context.clone()), Err(Error::Config(_))));
}

#[test]
fn missing_worker_is_a_config_error() {
    let mut fx = fixture();
    fx.config.workers.remove(&WorkerStage::Animate);
    assert!(matches!(plan(&fx.config, &fx.ws), Err(Error::Config(_))));
    // identity harmonization needs no parameter worker
    let mut fx = fixture();
    fx.config.workers.remove(&WorkerStage::HarmonizeParams);
    assert!(plan(&fx.config, &fx.ws).is_err());
    fx.config.harmonize.identity = true;
    assert!(plan(&fx.config, &fx.ws).is_ok());
}

#[test]
fn prompt_outside_the_clip_is_rejected_before_running() {
    let mut fx = fixture();
    fx.config.prompt = recast_core::Prompt::point(0, 500.0, 5.0);
    assert!(matches!(plan(&fx.config, &fx.ws), Err(Error::Prompt(_))));
    fx.config.prompt = recast_core::Prompt::point(N_FRAMES, 5.0, 5.0);
    assert!(plan(&fx.config, &fx.ws).is_err());
}

#[test]
fn unknown_scene_is_a_config_error() {
    let mut fx = fixture();
    fx.config.scene = "nope".into();
    assert!(matches!(plan(&fx.config, &fx.ws), Err(Error::Config(_))));
}

fn id(b: u8) -> ArtifactId {
    ArtifactId::from_bytes([b; 32])
}

#[test]
fn cache_key_examples() {
    let a = cache_key("remove", b"{\"iters\":200}", &[id(1), id(2)], ENGINE_VERSION);
    assert_eq!(a, cache_key("remove", b"{\"iters\":200}", &[id(2), id(1)], ENGINE_VERSION));
    assert_ne!(a, cache_key("remove", b"{\"iters\":201}", &[id(1), id(2)], ENGINE_VERSION));
    assert_ne!(a, cache_key("inpaint", b"{\"iters\":200}", &[id(1), id(2)], ENGINE_VERSION));
    assert_ne!(a, cache_key("remove", b"{\"iters\":200}", &[id(1), id(3)], ENGINE_VERSION));
    assert_ne!(a, cache_key("remove", b"{\"iters\":200}", &[id(1), id(2)], "other"));
    // field boundaries matter
    assert_ne!(cache_key("ab", b"c", &[], "v"), cache_key("a", b"bc", &[], "v"));
}

proptest! {
    #[test]
    fn one_byte_of_params_changes_the_key(
        params in proptest::collection::vec(any::<u8>(), 1..64),
        at in any::<prop::sample::Index>(),
        flip in 1u8..=255,
    ) {
        let base = cache_key("s", &params, &[id(1)], ENGINE_VERSION);
        let mut other = params.clone();
        let i = at.index(other.len());
        other[i] ^= flip;
        prop_assert_ne!(base, cache_key("s", &other, &[id(1)], ENGINE_VERSION));
    }

    #[test]
    fn input_order_does_not_matter(mut ids in proptest::collection::vec(any::<u8>(), 0..6)) {
        let a: Vec<_> = ids.iter().map(|&b| id(b)).collect();
        ids.reverse();
        let b: Vec<_> = ids.iter().map(|&b| id(b)).collect();
        prop_assert_eq!(cache_key("s", b"p", &a, "v"), cache_key("s", b"p", &b, "v"));
    }
}

#[test]
fn changing_band_radius_reruns_only_edge_refine() {
    let mut fx = fixture();
    let first = run_config(&fx.config, &fx.ws, &RunOptions::default()).unwrap();
    assert_eq!(sorted(first.executed()), sorted(StageKind::ALL.to_vec()));
    fx.config.edge.r_out = 3;
    let second = run_config(&fx.config, &fx.ws, &RunOptions::default()).unwrap();
    assert_eq!(second.executed(), [StageKind::EdgeRefine]);
    assert_eq!(second.cache_hits().len(), 6);
}

#[test]
fn identity_harmonize_changes_only_downstream_keys() {
    let mut fx = fixture();
    let a = run_config(&fx.config, &fx.ws, &RunOptions::default()).unwrap();
    fx.config.harmonize.identity = true;
    let b = run_config(&fx.config, &fx.ws, &RunOptions::default()).unwrap();
    assert_eq!(sorted(b.executed()), [StageKind::Harmonize, StageKind::EdgeRefine]);
    for stage in StageKind::ALL {
        let same = stage_key(&a, stage) == stage_key(&b, stage);
        let downstream = matches!(stage, StageKind::Harmonize | StageKind::EdgeRefine);
        assert_eq!(same, !downstream, "{stage}");
    }
}

#[test]
fn output_is_recorded_in_the_manifest() {
    let fx = fixture();
    let r = run_config(&fx.config, &fx.ws, &RunOptions::default()).unwrap();
    let entry = fx.ws.sequence_entry("result").unwrap().unwrap();
    assert_eq!(Some(entry.id), r.final_id);
    assert_eq!(entry.frames, N_FRAMES);
    assert_eq!(fx.ws.read_sequence("result").unwrap().id(), entry.id);
}

#[test]
fn run_log_matches_report_and_observer() {
    let fx = fixture();
    let seen: Arc<Mutex<Vec<RunEvent>>> = Arc::default();
    let sink = seen.clone();
    let opts = RunOptions {
        log_path: Some(fx.dir.path().join("run.jsonl")),
        observer: Some(Arc::new(move |e: &RunEvent| sink.lock().unwrap().push(e.clone()))),
        ..RunOptions::default()
    };
    let r = run_config(&fx.config, &fx.ws, &opts).unwrap();
    let logged = read_run_log(&r.log_path).unwrap();
    assert_eq!(logged, r.events);
    assert_eq!(*seen.lock().unwrap(), r.events);
    let starts = logged.iter().filter(|e| e.event == EventKind::StageStart).count();
    assert_eq!(starts, 7);
    let text = fs::read_to_string(&r.log_path).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["event"], "stage_start");
    assert_eq!(first["stage"], "segment_track");
}

#[test]
fn independent_branches_overlap() {
    let fx = fixture();
    let r = run_config(&fx.config, &fx.ws, &RunOptions::default()).unwrap();
    let at = |kind, stage| r.events.iter().position(|e| e.event == kind && e.stage == stage).unwrap();
    let (remove_start, remove_done) = (at(EventKind::StageStart, StageKind::Remove), at(EventKind::StageDone, StageKind::Remove));
    let pose_start = at(EventKind::StageStart, StageKind::PoseEstimate);
    assert!(pose_start < remove_done && remove_start < at(EventKind::StageDone, StageKind::PoseEstimate));
}

#[test]
fn sequential_runs_one_stage_at_a_time() {
    let fx = fixture();
    let opts = RunOptions {
        sequential: true,
        ..RunOptions::default()
    };
    let r = run_config(&fx.config, &fx.ws, &opts).unwrap();
    for pair in r.events.chunks(2) {
        assert_eq!(pair[0].event, EventKind::StageStart);
        assert_eq!(pair[1].event, EventKind::StageDone);
        assert_eq!(pair[0].stage, pair[1].stage);
    }
    let parallel = fixture();
    let p = run_config(&parallel.config, &parallel.ws, &RunOptions::default()).unwrap();
    assert_eq!(p.final_id, r.final_id);
}

#[test]
fn verify_cache_reexecutes_and_agrees() {
    let fx = fixture();
    run_config(&fx.config, &fx.ws, &RunOptions::default()).unwrap();
    let p = plan(&fx.config, &fx.ws).unwrap();
    let pool = WorkerPool::new(fx.ws.clone(), fx.config.workers.clone());
    let r = verify_cache(&p, &fx.ws, &pool).unwrap();
    assert!(r.mismatches().is_empty());
    let ok = r.events.iter().filter(|e| e.event == EventKind::VerifyOk).count();
    assert_eq!(ok, 7);
}

#[test]
fn verify_cache_reports_a_tampered_entry() {
    let fx = fixture();
    let r = run_config(&fx.config, &fx.ws, &RunOptions::default()).unwrap();
    let key = stage_key(&r, StageKind::Composite);
    let path = fx.ws.cache_root().join(key.to_hex()).join("entry.json");
    let mut entry: CacheEntry = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    entry.output_id = id(9);
    fs::write(&path, serde_json::to_string(&entry).unwrap()).unwrap();
    let p = plan(&fx.config, &fx.ws).unwrap();
    let pool = WorkerPool::builtin(fx.ws.clone());
    let v = verify_cache(&p, &fx.ws, &pool).unwrap();
    assert_eq!(v.mismatches(), [StageKind::Composite]);
}

#[test]
fn failed_stage_leaves_no_partial_entry() {
    let mut fx = fixture();
    with_worker(&mut fx.config, WorkerStage::PoseEstimate, &["--fault", "error"], 30);
    let err = run_config(&fx.config, &fx.ws, &RunOptions::default()).unwrap_err();
    match &err {
        RunError::Stage { stage, source } => {
            assert_eq!(*stage, StageKind::PoseEstimate);
            assert!(matches!(source, Error::Stage { code, .. } if code == "injected"), "{source}");
        }
        other => panic!("unexpected {other}"),
    }
    for e in fs::read_dir(fx.ws.cache_root()).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().into_string().unwrap();
        assert!(!name.starts_with('.'), "scratch dir {name} left behind");
        if e.path().is_dir() && !e.path().join("entry.json").exists() {
            // content-addressed masks and reference image
            let files: Vec<_> = fs::read_dir(e.path()).unwrap().map(|f| f.unwrap().file_name()).collect();
            assert!(files.iter().all(|f| f == "masks.json" || f == "reference.png"), "{files:?}");
        }
    }
    let log = read_run_log(&fx.ws.root().join("logs").read_dir().unwrap().next().unwrap().unwrap().path()).unwrap();
    assert!(log.iter().any(|e| e.event == EventKind::StageFailed && e.stage == StageKind::PoseEstimate));
    // a fixed worker resumes from what did complete
    fx.config.workers.insert(WorkerStage::PoseEstimate, recast_core::protocol::WorkerSpec::builtin());
    let r = run_config(&fx.config, &fx.ws, &RunOptions::default()).unwrap();
    assert!(r.cache_hits().contains(&StageKind::SegmentTrack));
    assert!(!r.executed().contains(&StageKind::SegmentTrack));
}

#[test]
fn run_on_a_prebuilt_plan_matches_run_config() {
    let a = fixture();
    let p = plan(&a.config, &a.ws).unwrap();
    let pool = WorkerPool::builtin(a.ws.clone());
    let r1 = run(&p, &a.ws, &pool, &RunOptions::default()).unwrap();
    let b = fixture();
    let r2 = run_config(&b.config, &b.ws, &RunOptions::default()).unwrap();
    assert_eq!(r1.final_id, r2.final_id);
}
