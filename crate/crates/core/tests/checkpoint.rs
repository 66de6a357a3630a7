use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use subeq::actor_critic::Actor;
use subeq::checkpoint::{Checkpoint, GROUPS};
use subeq::env::EnvConfig;
use subeq::error::Error;
use subeq::morphology::registry;
use subeq::set::SetConfig;
use subeq::td3::{Td3Config, Td3Trainer};
use subeq::variants::{make_variant, Variant, VariantKind};
use subeq::verify::random_state;

fn trainer(cfg: &SetConfig) -> Td3Trainer {
    let env = EnvConfig::new(registry::load("3d_hopper_5_full").unwrap());
    let spec = make_variant(Variant::new(VariantKind::Set), cfg).unwrap();
    Td3Trainer::new(env, spec, Td3Config { warmup: 50, batch: 8, total_steps: 80, ..Td3Config::default() }).unwrap()
}

#[test]
fn file_round_trip_is_bit_identical() {
    let mut t = trainer(&SetConfig::desk());
    t.run(None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    Checkpoint::from_trainer(&t).save(&path).unwrap();

    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.step, 80);
    let actor = ck.restore_actor().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 1..6 {
        let s = random_state(&mut rng, n);
        let (a, b) = (t.actor.act(&s).unwrap(), actor.act(&s).unwrap());
        assert!(a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let a = ck.restore_critic(false).unwrap();
    let s = random_state(&mut rng, 4);
    let act = vec![[0.1, -0.2, 0.3]; 4];
    assert_eq!(a.q_values(&s, &act).unwrap(), t.critic.q_values(&s, &act).unwrap());
}

#[test]
fn corrupt_files_are_rejected() {
    let t = trainer(&SetConfig::desk());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    Checkpoint::from_trainer(&t).save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut bad = bytes.clone();
    bad[..5].copy_from_slice(b"SGRL2");
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));

    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Io(_))));
}

/// Tensors one attention layer owns: the gram-block weights (W_m, two
/// two-layer MLPs), q/k/v with biases, W_u, W_Z, W_h with bias, and the
/// layer-norm gain and bias.
const PER_LAYER: usize = 1 + 4 + 4 + 6 + 1 + 1 + 2 + 2;

#[test]
fn one_blob_per_layer_tensor() {
    let cfg = SetConfig::default();
    let ck = Checkpoint::from_trainer(&trainer(&SetConfig { width: 16, qk_width: 8, matrix_hidden: 16, ..cfg }));
    for group in GROUPS {
        let stacks = if group.starts_with("actor") { 1 } else { 2 };
        for l in 0..cfg.layers {
            let tag = format!(".layer{l}.");
            let count = ck.tensors.iter().filter(|(n, _)| n.starts_with(group) && n.contains(&tag)).count();
            assert_eq!(count, PER_LAYER * stacks, "{group} layer {l}");
        }
    }
    let layer_blobs = ck.tensors.iter().filter(|(n, _)| n.contains(".layer")).count();
    assert_eq!(layer_blobs, PER_LAYER * cfg.layers * 6);
}

#[test]
fn actor_only_checkpoint_restores() {
    let spec = make_variant(Variant::with_hn(VariantKind::InputInvariant, 0.5), &SetConfig::desk()).unwrap();
    let actor = Actor::new(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut buf = Vec::new();
    Checkpoint::from_actor(&actor, &SetConfig::desk()).write_to(&mut buf).unwrap();
    let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap().restore_actor().unwrap();
    assert_eq!(back.variant(), actor.variant());
    let s = random_state(&mut ChaCha8Rng::seed_from_u64(3), 3);
    assert_eq!(back.act(&s).unwrap(), actor.act(&s).unwrap());
}
