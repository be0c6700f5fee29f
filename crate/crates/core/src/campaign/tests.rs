use super::*;

fn scripted(goal: u64, seed: u64) -> CampaignConfig {
    CampaignConfig { goal_successes: goal, seed, bandit: BanditConfig { k: 200, m: 200 }, ..Default::default() }
}

#[test]
fn noise_free_campaign_succeeds_every_time() {
    let report = Campaign::new(scripted(20, 1), None).unwrap().run().unwrap();
    assert_eq!(report.successes, 20);
    assert_eq!(report.total_rollouts, 20);
    assert!(report.arms.iter().all(|a| a.n_fail == 0));
    assert_eq!(report.best_arm_success_rate, Some(1.0));
}

fn noisy(goal: u64, seed: u64) -> CampaignConfig {
    CampaignConfig {
        retargeter: RetargeterConfig { noise_choices_mm: (1..=20).map(f64::from).collect(), ..Default::default() },
        ..scripted(goal, seed)
    }
}

#[test]
fn first_annotation_only_uses_one_arm() {
    let cfg = CampaignConfig { strategy: Strategy::FirstAnnotationOnly, ..scripted(10, 2) };
    let r = Campaign::new(cfg, None).unwrap().run().unwrap();
    assert_eq!(r.arms.len(), 1);
    assert_eq!(r.arms[0].n_suc, 10);
    assert_eq!(r.new_arm_attempts, 1);
}

#[test]
fn conservation_and_dataset_count() {
    for strategy in [Strategy::Bandit, Strategy::FreshEveryRollout, Strategy::FirstAnnotationOnly] {
        let cfg = CampaignConfig { strategy, max_rollouts: 40, ..noisy(15, 4) };
        let mut c = Campaign::new(cfg, None).unwrap();
        while !c.is_done() {
            c.step().unwrap();
            assert_eq!(c.generated.len() as u64, c.checkpoint().bandit.current_successes);
        }
        let r = c.report();
        let in_arms: u64 = r.arms.iter().map(|a| a.n_suc + a.n_fail).sum();
        assert_eq!(in_arms + r.discarded_new_arms, r.total_rollouts, "{strategy:?}");
        assert_eq!(r.arms.iter().map(|a| a.n_suc).sum::<u64>(), r.successes);
        assert!(r.successes <= r.total_rollouts);
        let b = &c.checkpoint().bandit;
        assert!(b.new_arm_successes <= b.new_arm_attempts);
        if strategy != Strategy::FirstAnnotationOnly {
            assert_eq!(r.discarded_new_arms, b.new_arm_attempts - b.new_arm_successes);
        }
    }
}

#[test]
fn generated_demos_replay_and_carry_provenance() {
    let mut c = Campaign::new(noisy(8, 5), None).unwrap();
    c.run().unwrap();
    let spec = c.cfg.spec();
    let audit = replay_audit(&c.generated, |_| spec.clone());
    assert!(audit.all_passed(), "{audit:?}");
    let ids: Vec<_> = c.checkpoint().library.iter().map(|e| e.annotation.id.clone()).collect();
    for d in &c.generated {
        match &d.provenance {
            Provenance::Generated { annotation_id, .. } => assert!(ids.contains(annotation_id)),
            p => panic!("{p:?}"),
        }
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = noisy(12, 6);
    cfg.output = OutputConfig {
        dataset: Some(dir.path().join("a.jsonl")),
        checkpoint: Some(dir.path().join("a.ckpt.json")),
        report: None,
    };
    let full = run_campaign(&cfg, None).unwrap();
    let full_data = read_dataset(cfg.output.dataset.as_ref().unwrap()).unwrap();

    let mut cfg2 = cfg.clone();
    cfg2.output.dataset = Some(dir.path().join("b.jsonl"));
    cfg2.output.checkpoint = Some(dir.path().join("b.ckpt.json"));
    let mut partial = Campaign::new(cfg2.clone(), None).unwrap();
    for _ in 0..7 {
        partial.step().unwrap();
    }
    drop(partial);
    // a stray line past the checkpoint is dropped on resume
    let extra = full_data[0].clone();
    dataset::append_demo(cfg2.output.dataset.as_ref().unwrap(), &extra).unwrap();
    let resumed = run_campaign(&cfg2, None).unwrap();
    assert_eq!(resumed.untimed(), full.untimed());
    assert_eq!(read_dataset(cfg2.output.dataset.as_ref().unwrap()).unwrap(), full_data);
    assert_eq!(full_data.len() as u64, full.successes);

    let mut other = cfg2.clone();
    other.seed = 99;
    other.output = cfg2.output.clone();
    assert!(matches!(run_campaign(&other, None), Err(CampaignError::Config(_))));
}

#[test]
fn same_seed_same_report() {
    let a = Campaign::new(noisy(6, 8), None).unwrap().run().unwrap();
    let b = Campaign::new(noisy(6, 8), None).unwrap().run().unwrap();
    assert_eq!(a.untimed(), b.untimed());
}

#[test]
fn baseline_is_reported() {
    let cfg = CampaignConfig { report_baseline: true, ..noisy(5, 9) };
    let r = run_campaign(&cfg, None).unwrap();
    assert!(r.baseline_success_rate.is_some());
    assert!(r.render_table().contains("fresh baseline"));
}

#[test]
fn config_validation() {
    assert!(CampaignConfig { goal_successes: 0, ..Default::default() }.validate().is_err());
    assert!(CampaignConfig { source_demos: 0, ..Default::default() }.validate().is_err());
    let mut bad = noisy(1, 0);
    bad.retargeter.noise_choices_mm.push(-1.0);
    assert!(bad.validate().is_err());
    let mismatched = CampaignConfig { task_spec: Some(TaskSpec::new(TaskKind::Stack)), ..Default::default() };
    assert!(mismatched.validate().is_err());
    let cfg: CampaignConfig = serde_json::from_str(r#"{"task": "stack", "goal_successes": 3}"#).unwrap();
    assert_eq!(cfg.task, TaskKind::Stack);
    assert_eq!(cfg.bandit.k, 1000);
}

mod llm {
    use super::*;
    use crate::annotation::{annotation_reply_json, scripted_annotate};
    use crate::gateway::{ScriptedTransport, TransportError};

    fn llm_cfg(goal: u64) -> CampaignConfig {
        CampaignConfig {
            source_demos: 1,
            annotator: AnnotatorConfig { mode: Mode::Llm, ..Default::default() },
            ..scripted(goal, 11)
        }
    }

    #[test]
    fn llm_annotator_with_mock_gateway() {
        let cfg = llm_cfg(4);
        let src = bundled_demos(&cfg.spec(), 1).unwrap().remove(0);
        let reply = annotation_reply_json(&scripted_annotate(&src, cfg.task));
        let gw = GatewayClient::new(ScriptedTransport::responder(move |req| {
            Ok(if req.prompt.contains("TIMESTEPS: t1") { "TIMESTEPS: 0, 20, 40".to_string() } else { reply.clone() })
        }));
        let r = Campaign::new(cfg, Some(&gw)).unwrap().run().unwrap();
        assert_eq!(r.successes, 4);
        assert!(gw.audit().entries().iter().all(|e| e.ok));
        assert!(gw.audit().entries().len() >= 2);
    }

    #[test]
    fn malformed_replies_count_as_failed_rollouts() {
        let mut cfg = llm_cfg(1);
        cfg.max_rollouts = 3;
        let gw = GatewayClient::new(ScriptedTransport::always("no idea"));
        let r = Campaign::new(cfg, Some(&gw)).unwrap().run().unwrap();
        assert_eq!(r.total_rollouts, 3);
        assert_eq!(r.successes, 0);
        assert_eq!(r.pipeline_failures, 3);
    }

    #[test]
    fn gateway_failure_aborts_with_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = llm_cfg(3);
        cfg.output.checkpoint = Some(dir.path().join("c.json"));
        let gw = GatewayClient::new(ScriptedTransport::responder(|_| Err(TransportError::Auth("missing key".into()))));
        match run_campaign(&cfg, Some(&gw)) {
            Err(CampaignError::Gateway { rollout: 0, source: GatewayError::Auth(_) }) => {}
            other => panic!("{other:?}"),
        }
        let cp = Checkpoint::load(cfg.output.checkpoint.as_ref().unwrap()).unwrap();
        assert!(cp.rollouts.is_empty() && cp.library.is_empty());

        let src = bundled_demos(&cfg.spec(), 1).unwrap().remove(0);
        let reply = annotation_reply_json(&scripted_annotate(&src, cfg.task));
        let ok = GatewayClient::new(ScriptedTransport::responder(move |req| {
            Ok(if req.prompt.contains("TIMESTEPS: t1") { "TIMESTEPS: 0, 20".to_string() } else { reply.clone() })
        }));
        assert_eq!(run_campaign(&cfg, Some(&ok)).unwrap().successes, 3);
    }

    #[test]
    fn missing_gateway_is_a_failed_rollout() {
        let mut cfg = llm_cfg(1);
        cfg.max_rollouts = 2;
        let r = Campaign::new(cfg, None).unwrap().run().unwrap();
        assert_eq!(r.pipeline_failures, 2);
    }
}

#[test]
fn single_annotation_rates_per_task() {
    let rate = |task| {
        let cfg =
            CampaignConfig { task, strategy: Strategy::FirstAnnotationOnly, max_rollouts: 30, ..scripted(1000, 1) };
        Campaign::new(cfg, None).unwrap().run().unwrap().success_rate
    };
    for task in [TaskKind::PickPlace, TaskKind::Stack, TaskKind::DrawerMug] {
        assert_eq!(rate(task), 1.0, "{task}");
    }
    // one annotation fixes which block ends up on the bottom
    let flipped = rate(TaskKind::StackFlipped);
    assert!(flipped > 0.2 && flipped < 0.8, "{flipped}");
}
