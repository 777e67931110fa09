use xdiff_core::classifier::KStarAnnotation;
use xdiff_core::diffusion::{build_schedule, NoiseSchedule, ScheduleParams};
use xdiff_core::numeric::{checkpoint::write_net, FeedForwardNet, SeededRng};
use xdiff_core::policy::{
    demodiffusion_sample, human_steps, infer_action, train_policy, PolicyConfig, PolicyModel,
    TrainInputs, TrainRegime,
};
use xdiff_core::synth::{
    generate_human_demos, generate_robot_demos, DemoDataset, NoiseParams, Normalizer, StyleMix,
    TaskKind, TaskSpec,
};

const H: usize = 8;

fn data() -> (DemoDataset, DemoDataset) {
    let task = TaskSpec::new(TaskKind::PickPlace);
    let mut r = generate_robot_demos(&task, 3, 11).unwrap();
    let mut h =
        generate_human_demos(&task, 8, &StyleMix::default(), &NoiseParams::default(), 12).unwrap();
    let n = Normalizer::fit_robot(&r).unwrap();
    r.normalizer = Some(n.clone());
    h.normalizer = Some(n);
    (r, h)
}

fn cfg() -> PolicyConfig {
    PolicyConfig {
        steps: 40,
        batch: 16,
        hidden: 16,
        depth: 2,
        ..Default::default()
    }
}

fn schedule() -> NoiseSchedule {
    build_schedule(ScheduleParams::default()).unwrap()
}

fn bytes(net: &FeedForwardNet) -> Vec<u8> {
    let mut v = Vec::new();
    write_net(net, &mut v).unwrap();
    v
}

fn train(
    regime: TrainRegime,
    r: &DemoDataset,
    h: &DemoDataset,
    ann: Option<&KStarAnnotation>,
    cfg: &PolicyConfig,
) -> xdiff_core::policy::PolicyTraining {
    let inputs = TrainInputs {
        robot: r,
        human: Some(h),
        annotation: ann,
        validation: None,
    };
    train_policy(regime, inputs, &schedule(), cfg, H, 5).unwrap()
}

#[test]
fn zero_threshold_xdiffusion_is_naive() {
    let (r, h) = data();
    let zero = KStarAnnotation::constant(&h, H, 100, 0);
    let x = train(TrainRegime::XDiffusion, &r, &h, Some(&zero), &cfg());
    let n = train(TrainRegime::Naive, &r, &h, None, &cfg());
    assert_eq!(bytes(&x.model.net), bytes(&n.model.net));
    assert_eq!(
        x.loss_trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        n.loss_trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn naive_without_human_samples_is_robot() {
    let (r, h) = data();
    let c = PolicyConfig {
        human_sample_frac: 0.0,
        ..cfg()
    };
    let n = train(TrainRegime::Naive, &r, &h, None, &c);
    let ro = train(TrainRegime::Robot, &r, &h, None, &c);
    assert_eq!(bytes(&n.model.net), bytes(&ro.model.net));
    assert_eq!(n.counters.human_drawn, 0);
}

#[test]
fn maximal_threshold_admits_only_the_last_step() {
    let (r, h) = data();
    // Thresholds are clamped to K, and a sample at k = K always passes.
    let never = KStarAnnotation::constant(&h, H, 100, 101);
    assert!(never.entries.iter().all(|e| e.k_star == 100));
    let c = PolicyConfig { steps: 200, ..cfg() };
    let x = train(TrainRegime::XDiffusion, &r, &h, Some(&never), &c);
    assert!(x.counters.human_drawn > 1000);
    let rate = x.counters.human_pass_rate();
    assert!(rate > 0.0 && rate < 0.03, "{rate}");
}

#[test]
fn pass_rate_follows_the_threshold() {
    let (r, h) = data();
    let c = PolicyConfig { steps: 200, ..cfg() };
    // k ~ U{1..100}; k >= 51 passes half the time.
    let half = KStarAnnotation::constant(&h, H, 100, 51);
    let x = train(TrainRegime::XDiffusion, &r, &h, Some(&half), &c);
    let rate = x.counters.human_pass_rate();
    assert!((rate - 0.5).abs() < 0.06, "{rate}");
}

#[test]
fn xdiffusion_requires_an_annotation() {
    let (r, h) = data();
    let inputs = TrainInputs {
        robot: &r,
        human: Some(&h),
        annotation: None,
        validation: None,
    };
    let e = train_policy(TrainRegime::XDiffusion, inputs, &schedule(), &cfg(), H, 1).unwrap_err();
    assert_eq!(e.kind(), "config");
}

#[test]
fn filtered_never_draws_infeasible_styles() {
    let (r, mut h) = data();
    for t in &mut h.trajectories {
        t.feasible = false;
    }
    let inputs = TrainInputs {
        robot: &r,
        human: Some(&h),
        annotation: None,
        validation: None,
    };
    assert!(train_policy(TrainRegime::Filtered, inputs, &schedule(), &cfg(), H, 1).is_err());
}

#[test]
fn checkpoint_round_trip_samples_identically() {
    let (r, h) = data();
    let t = train(TrainRegime::Naive, &r, &h, None, &cfg());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.ckpt");
    t.model.save(&p, Some(serde_json::json!({"note": 1}))).unwrap();
    let (m, side) = PolicyModel::load(&p).unwrap();
    assert_eq!(side.meta.unwrap()["note"], 1);
    let s = &r.trajectories[0].states[0];
    let sched = schedule();
    let a = infer_action(&t.model, &sched, s, 20, &mut SeededRng::new(3)).unwrap();
    let b = infer_action(&m, &sched, s, 20, &mut SeededRng::new(3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn demodiffusion_endpoints_match_single_samplers() {
    let (r, h) = data();
    let human = train(TrainRegime::Naive, &r, &h, None, &cfg()).model;
    let robot = train(TrainRegime::Robot, &r, &h, None, &cfg()).model;
    let sched = schedule();
    let s = &r.trajectories[1].states[2];
    let sample = |split: f64| demodiffusion_sample(&human, &robot, &sched, s, 20, split, &mut SeededRng::new(8)).unwrap();
    let single = |m: &PolicyModel| infer_action(m, &sched, s, 20, &mut SeededRng::new(8)).unwrap();
    assert_eq!(sample(0.0), single(&robot));
    assert_eq!(sample(1.0), single(&human));
    assert_eq!(human_steps(0.6, 20), 12);
    assert!(demodiffusion_sample(&human, &robot, &sched, s, 20, 1.5, &mut SeededRng::new(8)).is_err());
}
