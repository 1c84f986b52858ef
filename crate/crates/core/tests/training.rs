use histosynth_core::latent::seed_latent;
use histosynth_core::stain_prep::PatchPair;
use histosynth_core::toy::{toy_dataset, toy_palette};
use histosynth_core::training::gan::{read_loss_log, StepPhase};
use histosynth_core::training::*;
use histosynth_core::Error;

fn tiny_config() -> GanConfig {
    let mut cfg = GanConfig::new(16, 3);
    cfg.generator.base_channels = 8;
    cfg.generator.schedule = vec![8, 4];
    cfg.generator.spade_hidden = 4;
    cfg.discriminator.channels = vec![4, 8];
    cfg.train.batch_size = 2;
    cfg.train.iterations = 6;
    cfg.train.seed = 17;
    cfg
}

fn data() -> Vec<PatchPair> {
    toy_dataset(6, 16, 3)
}

fn run(until: u64) -> (GanState, Vec<LossRecord>) {
    let mut s = GanState::new(tiny_config(), Some(toy_palette())).unwrap();
    let log = train(&mut s, &data(), until, |_, _| Ok(())).unwrap();
    (s, log)
}

#[test]
fn fixed_seed_runs_are_identical() {
    let (a, la) = run(4);
    let (b, lb) = run(4);
    assert_eq!(la, lb);
    assert_eq!(a.generator.params.digest(), b.generator.params.digest());
    assert_eq!(a.to_container().to_bytes(), b.to_container().to_bytes());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (_, full) = run(6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let (mid, first) = run(3);
    mid.save(&path).unwrap();
    let mut resumed = GanState::load(&path).unwrap();
    assert_eq!(resumed.iteration, 3);
    let rest = train(&mut resumed, &data(), 6, |_, _| Ok(())).unwrap();
    let joined: Vec<LossRecord> = first.into_iter().chain(rest).collect();
    assert_eq!(joined, full);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (s, _) = run(2);
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    s.save(&p1).unwrap();
    GanState::load(&p1).unwrap().save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let (_, g, palette) = load_generator(&p1).unwrap();
    assert_eq!(palette, Some(toy_palette()));
    let m = &data()[0].label;
    for seed in 0..3 {
        assert_eq!(
            g.generate(m, &seed_latent(seed)).unwrap(),
            s.generator.generate(m, &seed_latent(seed)).unwrap()
        );
    }
    let bytes = std::fs::read(&p1).unwrap();
    std::fs::write(&p2, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(GanState::load(&p2), Err(Error::Checkpoint(_))));
}

#[test]
fn each_update_touches_only_its_network() {
    let mut s = GanState::new(tiny_config(), None).unwrap();
    let g0 = s.generator.params.digest();
    let d0 = s.discriminators.params.digest();
    let mut seen = Vec::new();
    train_step_observed(&mut s, &data(), |phase, st| {
        seen.push((phase, st.generator.params.digest(), st.discriminators.params.digest()));
    })
    .unwrap();
    assert_eq!(seen.len(), 2);
    let (p1, g1, d1) = &seen[0];
    let (p2, g2, d2) = &seen[1];
    assert_eq!((*p1, *p2), (StepPhase::DiscriminatorUpdated, StepPhase::GeneratorUpdated));
    assert_eq!(g1, &g0);
    assert_ne!(d1, &d0);
    assert_ne!(g2, &g0);
    assert_eq!(d2, d1);
}

#[test]
fn train_to_dir_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.train.iterations = 4;
    cfg.train.checkpoint_every = 2;
    let mut s = GanState::new(cfg, Some(toy_palette())).unwrap();
    let art = train_to_dir(&mut s, &data(), dir.path()).unwrap();
    let log = read_loss_log(&art.loss_log).unwrap();
    assert_eq!(log.len(), 4);
    assert_eq!(log, art.records);
    let header = std::fs::read_to_string(&art.loss_log).unwrap();
    assert!(header.starts_with("iteration,lr,d_loss,g_gan_loss,g_perc_loss\n"));
    for f in ["checkpoint_0000002.ckpt", "sample_0000002.png", "sample_0000004.png", "final.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn zero_iterations_checkpoint_is_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.train.iterations = 0;
    let mut s = GanState::new(cfg.clone(), None).unwrap();
    let art = train_to_dir(&mut s, &data(), dir.path()).unwrap();
    assert!(art.records.is_empty());
    let fresh = GanState::new(cfg, None).unwrap();
    assert_eq!(
        GanState::load(&art.final_checkpoint).unwrap().to_container().to_bytes(),
        fresh.to_container().to_bytes()
    );
}

#[test]
fn empty_dataset_is_a_config_error() {
    let mut s = GanState::new(tiny_config(), None).unwrap();
    assert!(matches!(train(&mut s, &[], 1, |_, _| Ok(())), Err(Error::Config(_))));
}

#[test]
fn glorot_variance() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    let w = glorot_init(100, 100, 1_000_000, &mut rng);
    let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
    let expected = 2.0 / 200.0;
    assert!((var - expected).abs() < 0.05 * expected, "{var}");
}
