use rand::Rng as _;

use super::*;
use crate::error::Error;
use crate::model::{DialoguePair, ModelConfig, Seq2SeqModel, SpeakerId, VocabId, PERSONA};
use crate::rng::seeded;
use crate::tensor::{Matrix, ParamSet, ParamTag};

fn config(persona: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 14,
        embed_dim: 4,
        hidden_size: 5,
        persona_dim: 3,
        num_layers: 2,
        num_speakers: 4,
        persona_enabled: persona,
        max_len: 6,
        dropout: 0.1,
    }
}

fn pair(q: &[u32], r: &[u32], s: u32) -> DialoguePair {
    let mut resp: Vec<VocabId> = r.iter().map(|&t| VocabId(t)).collect();
    resp.push(VocabId::EOS);
    DialoguePair::new(q.iter().map(|&t| VocabId(t)).collect(), resp, SpeakerId(s)).unwrap()
}

/// Speaker `s` answers every question with its own two-token signature.
fn speaker_data(s: u32, n: usize) -> ClientData {
    let make = |i: usize| pair(&[4 + (i % 5) as u32, 9], &[10 + s, 4 + (i % 3) as u32], s);
    ClientData {
        speaker: SpeakerId(s),
        train: (0..n).map(make).collect(),
        dev: (n..n + 3).map(make).collect(),
    }
}

fn all_data(n: &[usize]) -> Vec<ClientData> {
    n.iter().enumerate().map(|(s, &k)| speaker_data(s as u32, k)).collect()
}

fn fed_cfg(strategy: Strategy) -> FedConfig {
    FedConfig {
        strategy,
        local_epochs: 2,
        total_rounds: 3,
        lr: 0.3,
        batch_size: 4,
        seed: 17,
        workers: 2,
        ..FedConfig::default()
    }
}

fn initial(persona: bool) -> ParamSet {
    let pre = Seq2SeqModel::new(config(false), 5).unwrap();
    lift_pretrained(pre.params(), &config(persona), 6).unwrap()
}

fn scalar_set(v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("w", Matrix::new(1, 1, vec![v]).unwrap(), ParamTag::Federated).unwrap();
    p
}

fn random_set(rng: &mut crate::rng::Rng) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("a", Matrix::new(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(), ParamTag::Federated)
        .unwrap();
    p.insert("b", Matrix::new(4, 1, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(), ParamTag::Federated)
        .unwrap();
    p
}

fn update(id: u32, c: u64, d: ParamSet) -> ClientUpdate {
    ClientUpdate::new(SpeakerId(id), c, d).unwrap()
}

#[test]
fn wire_round_trip_and_errors() {
    let mut rng = seeded(1);
    let u = update(3, 42, random_set(&mut rng));
    let bytes = u.to_bytes();
    assert_eq!(&bytes[..4], b"PFLU");
    let back = ClientUpdate::from_bytes(&bytes).unwrap();
    assert_eq!(back.client_id(), SpeakerId(3));
    assert_eq!(back.sample_count(), 42);
    assert!(back.delta().values_bit_eq(u.delta()));
    assert_eq!(back.to_bytes(), bytes);
    assert!(matches!(ClientUpdate::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(ClientUpdate::from_bytes(&extra), Err(Error::Format(_))));
    assert!(matches!(ClientUpdate::from_bytes(b"PFLC\x01\0\0\0"), Err(Error::Format(_))));

    let mut private = ParamSet::new();
    private.insert(PERSONA, Matrix::zeros(1, 2), ParamTag::Private).unwrap();
    assert!(matches!(ClientUpdate::new(SpeakerId(0), 1, private), Err(Error::Schema(_))));
    assert!(contains_any_name(b"xxpersona.embedyy", &[PERSONA.to_string()]));
    assert!(!contains_any_name(&bytes, &[PERSONA.to_string()]));
}

#[test]
fn server_refuses_private_tensors() {
    let m = Seq2SeqModel::new(config(true), 1).unwrap();
    assert!(matches!(ServerState::new(m.params().clone()), Err(Error::Schema(_))));
    assert!(ServerState::new(m.params().federated()).is_ok());
}

#[test]
fn fedavg_small_cases() {
    let mut s = ServerState::new(scalar_set(1.0)).unwrap();
    aggregate_fedavg(&mut s, &[update(0, 7, scalar_set(0.25))]).unwrap();
    assert_eq!(s.params().value("w").unwrap().get(0, 0), 1.25);
    assert_eq!(s.round(), 1);

    let mut s = ServerState::new(scalar_set(10.0)).unwrap();
    aggregate_fedavg(&mut s, &[update(0, 1, scalar_set(1.0)), update(1, 1, scalar_set(3.0))]).unwrap();
    assert_eq!(s.params().value("w").unwrap().get(0, 0), 12.0);

    assert!(matches!(aggregate_fedavg(&mut s, &[]), Err(Error::Aggregation(_))));
    let mut other = ParamSet::new();
    other.insert("v", Matrix::zeros(1, 1), ParamTag::Federated).unwrap();
    assert!(matches!(aggregate_fedavg(&mut s, &[update(0, 1, other)]), Err(Error::Schema(_))));
    let wrong_shape = {
        let mut p = ParamSet::new();
        p.insert("w", Matrix::zeros(2, 1), ParamTag::Federated).unwrap();
        p
    };
    assert!(matches!(aggregate_fedavg(&mut s, &[update(0, 1, wrong_shape)]), Err(Error::Schema(_))));
    assert!(matches!(
        aggregate_fedavg(&mut s, &[update(0, 1, scalar_set(1.0)), update(0, 2, scalar_set(1.0))]),
        Err(Error::Aggregation(_))
    ));
    assert!(matches!(aggregate_fedavg(&mut s, &[update(0, 0, scalar_set(1.0))]), Err(Error::Aggregation(_))));
}

#[test]
fn fedavg_matches_weighted_sum_oracle_and_ignores_order() {
    let mut rng = seeded(99);
    for trial in 0..25 {
        let w = random_set(&mut rng);
        let n = 2 + trial % 4;
        let counts: Vec<u64> = if trial == 0 { vec![2, 5, 3] } else { (0..n).map(|_| rng.random_range(1..50)).collect() };
        let ups: Vec<ClientUpdate> = counts.iter().enumerate().map(|(i, &c)| update(i as u32 * 3, c, random_set(&mut rng))).collect();

        let mut s = ServerState::new(w.clone()).unwrap();
        aggregate_fedavg(&mut s, &ups).unwrap();

        let total: f64 = counts.iter().map(|&c| c as f64).sum();
        for t in w.iter() {
            for k in 0..t.value.len() {
                let sum: f64 = ups.iter().map(|u| u.sample_count() as f64 * u.delta().value(&t.name).unwrap().data()[k]).sum();
                let expect = t.value.data()[k] + sum / total;
                let got = s.params().value(&t.name).unwrap().data()[k];
                assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
            }
        }

        let mut rev = ups.clone();
        rev.reverse();
        let k = trial % rev.len();
        rev.rotate_left(k);
        let mut s2 = ServerState::new(w.clone()).unwrap();
        aggregate_fedavg(&mut s2, &rev).unwrap();
        assert!(s.params().values_bit_eq(s2.params()));
    }
}

#[test]
fn equal_deltas_move_by_that_delta() {
    let mut rng = seeded(5);
    let w = random_set(&mut rng);
    let d = random_set(&mut rng);
    let ups: Vec<ClientUpdate> = [1u64, 9, 4].iter().enumerate().map(|(i, &c)| update(i as u32, c, d.clone())).collect();
    let mut s = ServerState::new(w.clone()).unwrap();
    aggregate_fedavg(&mut s, &ups).unwrap();
    for t in s.params().iter() {
        let base = w.value(&t.name).unwrap();
        let dd = d.value(&t.name).unwrap();
        for k in 0..t.value.len() {
            assert!((t.value.data()[k] - base.data()[k] - dd.data()[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn feddrop_behaviour() {
    assert_eq!(feddrop_keep(10, 0.1), 9);
    assert_eq!(feddrop_keep(2, 0.5), 1);
    assert_eq!(feddrop_keep(3, 0.5), 2);
    assert_eq!(feddrop_keep(7, 0.0), 7);

    let mut rng = seeded(8);
    let w = random_set(&mut rng);
    let ups: Vec<ClientUpdate> = (0..5).map(|i| update(i, 1 + i as u64, random_set(&mut rng))).collect();
    let mut a = ServerState::new(w.clone()).unwrap();
    let mut b = ServerState::new(w.clone()).unwrap();
    aggregate_fedavg(&mut a, &ups).unwrap();
    let kept = aggregate_feddrop(&mut b, &ups, 0.0, &mut seeded(3)).unwrap();
    assert_eq!(kept.len(), 5);
    assert!(a.params().values_bit_eq(b.params()));

    let two = vec![update(0, 4, scalar_set(1.0)), update(1, 6, scalar_set(-2.0))];
    let mut s = ServerState::new(scalar_set(0.0)).unwrap();
    let kept = aggregate_feddrop(&mut s, &two, 0.5, &mut seeded(11)).unwrap();
    assert_eq!(kept.len(), 1);
    let expect = if kept[0] == SpeakerId(0) { 1.0 } else { -2.0 };
    assert_eq!(s.params().value("w").unwrap().get(0, 0), expect);

    let subset = |seed| {
        let mut s = ServerState::new(w.clone()).unwrap();
        aggregate_feddrop(&mut s, &ups, 0.6, &mut seeded(seed)).unwrap()
    };
    assert_eq!(subset(21), subset(21));
    assert_eq!(subset(21).len(), 2);
    assert!(matches!(aggregate_feddrop(&mut s, &[], 0.5, &mut seeded(0)), Err(Error::Aggregation(_))));
    assert!(matches!(aggregate_feddrop(&mut s, &two, 1.0, &mut seeded(0)), Err(Error::Config(_))));
}

#[test]
fn clients_start_from_shared_parameters() {
    let init = initial(true);
    let data = all_data(&[6, 9, 4]);
    let clients = init_clients(&init, &config(true), data, 3).unwrap();
    assert_eq!(clients.iter().map(ClientState::sample_count).sum::<usize>(), 19);
    for c in &clients {
        assert!(c.model.params().federated().values_bit_eq(&init));
        let table = c.model.params().value(PERSONA).unwrap();
        for r in 0..table.rows() {
            let zero = table.row(r).iter().all(|&v| v == 0.0);
            assert_eq!(zero, r != c.client_id.index(), "client {} row {r}", c.client_id.0);
        }
    }
    assert_ne!(clients[0].model.persona_row(SpeakerId(0)).unwrap(), clients[1].model.persona_row(SpeakerId(1)).unwrap());

    let mut empty = all_data(&[3, 3]);
    empty[1].train.clear();
    assert!(matches!(init_clients(&init, &config(true), empty, 3), Err(Error::Config(_))));
    let mut mixed = all_data(&[3, 3]);
    mixed[0].train.push(pair(&[4], &[5], 1));
    assert!(matches!(init_clients(&init, &config(true), mixed, 3), Err(Error::Input(_))));
    let mut dup = all_data(&[3, 3]);
    dup[1] = speaker_data(0, 3);
    assert!(matches!(init_clients(&init, &config(true), dup, 3), Err(Error::Config(_))));
}

fn one_client(persona: bool) -> (ParamSet, ClientState) {
    let init = initial(persona);
    let c = init_clients(&init, &config(persona), vec![speaker_data(1, 20)], 4).unwrap().remove(0);
    (init, c)
}

#[test]
fn zero_lr_gives_zero_delta() {
    let (init, mut c) = one_client(true);
    let cfg = FedConfig { lr: 0.0, ..fed_cfg(Strategy::FedAvg) };
    let (u, nll) = local_train(&mut c, &init, &cfg, 0).unwrap();
    assert!(nll.is_finite());
    assert!(u.delta().iter().all(|t| t.value.data().iter().all(|&v| v == 0.0)));
    assert_eq!(u.sample_count(), 20);
    assert!(!u.delta().contains(PERSONA));
}

#[test]
fn proximal_term_vanishes_at_zero_and_restrains_drift() {
    let run = |strategy, mu| {
        let (init, mut c) = one_client(true);
        let cfg = FedConfig { mu, batch_size: 1, lr: 0.1, ..fed_cfg(strategy) };
        local_train(&mut c, &init, &cfg, 2).unwrap().0
    };
    let avg = run(Strategy::FedAvg, 0.5);
    let prox0 = run(Strategy::FedProx, 0.0);
    assert_eq!(avg.to_bytes(), prox0.to_bytes());
    let strong = run(Strategy::FedProx, 1e6);
    assert!(strong.delta_norm() < avg.delta_norm(), "{} vs {}", strong.delta_norm(), avg.delta_norm());
}

#[test]
fn local_train_checks_anchor_schema() {
    let (_, mut c) = one_client(true);
    let wrong = initial(false);
    assert!(matches!(local_train(&mut c, &wrong, &fed_cfg(Strategy::FedAvg), 0), Err(Error::Schema(_))));
}

#[test]
fn zero_rounds_keep_initial_parameters() {
    let init = initial(true);
    let cfg = FedConfig { total_rounds: 0, ..fed_cfg(Strategy::FedAvg) };
    let sim = run_simulation(&init, &config(true), all_data(&[5, 5]), &cfg, |_, _| {}).unwrap();
    assert!(sim.server.params().values_bit_eq(&init));
    assert!(sim.log.is_empty());
    assert_eq!(sim.initial_dev_ppl.len(), 2);
    assert_eq!(sim.final_mean_dev_ppl(), sim.initial_mean_dev_ppl());
}

#[test]
fn identical_clients_average_to_any_one_of_them() {
    // persona-free and dropout-free, one batch per epoch: clients differ
    // only in shuffle order, which only reorders gradient sums
    let mut cfg_m = config(false);
    cfg_m.dropout = 0.0;
    let pre = Seq2SeqModel::new(cfg_m.clone(), 2).unwrap();
    let init = pre.params().federated();
    let data: Vec<ClientData> = (0..3)
        .map(|s| {
            let d = speaker_data(0, 6);
            let relabel = |ps: Vec<DialoguePair>| {
                ps.into_iter()
                    .map(|p| DialoguePair::new(p.question, p.response, SpeakerId(s)).unwrap())
                    .collect()
            };
            ClientData { speaker: SpeakerId(s), train: relabel(d.train), dev: relabel(d.dev) }
        })
        .collect();
    let cfg = FedConfig { batch_size: 64, ..fed_cfg(Strategy::FedAvg) };
    let mut server = ServerState::new(init.clone()).unwrap();
    let mut clients = init_clients(&init, &cfg_m, data, 1).unwrap();
    run_round(&mut server, &mut clients, &cfg).unwrap();
    let local = clients[1].model.params().federated();
    for t in server.params().iter() {
        let l = local.value(&t.name).unwrap();
        for (a, b) in t.value.data().iter().zip(l.data()) {
            assert!((a - b).abs() < 1e-10, "{}: {a} vs {b}", t.name);
        }
    }
}

#[test]
fn rounds_broadcast_before_training() {
    let init = initial(true);
    let cfg = FedConfig { lr: 0.0, ..fed_cfg(Strategy::FedAvg) };
    let mut server = ServerState::new(init.clone()).unwrap();
    let mut clients = init_clients(&init, &config(true), all_data(&[4, 4]), 1).unwrap();
    // desynchronise one client; the broadcast must overwrite it
    clients[1].model.params_mut().value_mut("proj.b").unwrap().fill(3.0);
    run_round(&mut server, &mut clients, &cfg).unwrap();
    for c in &clients {
        assert!(c.model.params().federated().values_bit_eq(&init));
    }
    assert!(server.params().values_bit_eq(&init));
}

#[test]
fn messages_and_server_never_carry_persona() {
    let init = initial(true);
    let cfg = fed_cfg(Strategy::FedProx);
    let private = vec![PERSONA.to_string()];
    let mut seen = 0;
    let sim = run_simulation(&init, &config(true), all_data(&[5, 7, 6]), &cfg, |rec, msgs| {
        assert_eq!(msgs.len(), rec.participants.len());
        for m in msgs {
            assert!(!contains_any_name(m, &private));
            seen += 1;
        }
    })
    .unwrap();
    assert_eq!(seen, 9);
    assert_eq!(sim.log.len(), 3);
    assert!(sim.server.params().names_with_tag(ParamTag::Private).is_empty());
    let ckpt = crate::tensor::Checkpoint::new("", sim.server.params().clone()).to_bytes();
    assert!(!contains_any_name(&ckpt, &private));
    for (i, r) in sim.log.iter().enumerate() {
        assert_eq!(r.round, i + 1);
        assert_eq!(r.aggregated, r.participants);
        assert!(r.wallclock.is_none());
        assert!(r.clients.iter().all(|c| c.dev_ppl.is_some() && c.delta_l2 > 0.0));
    }
}

#[test]
fn persona_row_only_moves_when_its_client_trains() {
    let init = initial(true);
    let cfg = fed_cfg(Strategy::FedAvg);
    let mut server = ServerState::new(init.clone()).unwrap();
    let mut clients = init_clients(&init, &config(true), all_data(&[5, 5, 5]), 2).unwrap();
    let rows: Vec<Vec<f64>> = clients.iter().map(|c| c.model.persona_row(c.client_id).unwrap().to_vec()).collect();
    let (active, idle) = clients.split_at_mut(2);
    run_round(&mut server, active, &cfg).unwrap();
    run_round(&mut server, active, &cfg).unwrap();
    let idle_row = idle[0].model.persona_row(SpeakerId(2)).unwrap();
    assert!(idle_row.iter().zip(&rows[2]).all(|(a, b)| a.to_bits() == b.to_bits()));
    for c in active.iter() {
        assert_ne!(c.model.persona_row(c.client_id).unwrap(), &rows[c.client_id.index()][..]);
        let table = c.model.params().value(PERSONA).unwrap();
        for r in (0..3).filter(|&r| r != c.client_id.index()) {
            assert!(table.row(r).iter().all(|&v| v == 0.0));
        }
    }
}

fn simulate(cfg: &FedConfig, persona: bool) -> (Simulation, Vec<String>) {
    let mut log = Vec::new();
    let sim = run_simulation(&initial(persona), &config(persona), all_data(&[6, 5, 7]), cfg, |rec, _| {
        log.push(serde_json::to_string(rec).unwrap())
    })
    .unwrap();
    (sim, log)
}

#[test]
fn simulations_are_reproducible_and_reductions_hold() {
    let (a, log_a) = simulate(&fed_cfg(Strategy::FedAvg), true);
    let (b, log_b) = simulate(&FedConfig { workers: 1, ..fed_cfg(Strategy::FedAvg) }, true);
    assert!(a.server.params().values_bit_eq(b.server.params()));
    assert_eq!(log_a, log_b);
    for (x, y) in a.clients.iter().zip(&b.clients) {
        assert!(x.model.params().values_bit_eq(y.model.params()));
    }

    let (p, _) = simulate(&FedConfig { mu: 0.0, ..fed_cfg(Strategy::FedProx) }, true);
    assert!(a.server.params().values_bit_eq(p.server.params()));
    let (d, _) = simulate(&FedConfig { drop_fraction: 0.0, ..fed_cfg(Strategy::FedDrop) }, true);
    assert!(a.server.params().values_bit_eq(d.server.params()));

    let (prox, _) = simulate(&FedConfig { mu: 0.5, ..fed_cfg(Strategy::FedProx) }, true);
    assert!(!a.server.params().values_bit_eq(prox.server.params()));
    let (drop, _) = simulate(&FedConfig { drop_fraction: 0.5, ..fed_cfg(Strategy::FedDrop) }, true);
    assert!(drop.log.iter().all(|r| r.aggregated.len() == 2));
}

#[test]
fn literal_private_scaling_shrinks_persona_steps() {
    let init = initial(true);
    let run = |literal| {
        let cfg = FedConfig { literal_private_scaling: literal, ..fed_cfg(Strategy::FedAvg) };
        let mut server = ServerState::new(init.clone()).unwrap();
        let mut clients = init_clients(&init, &config(true), all_data(&[4, 12]), 9).unwrap();
        let before = clients[0].model.persona_row(SpeakerId(0)).unwrap().to_vec();
        run_round(&mut server, &mut clients, &cfg).unwrap();
        (before, clients[0].model.persona_row(SpeakerId(0)).unwrap().to_vec())
    };
    let (before, plain) = run(false);
    let (_, scaled) = run(true);
    for ((b, p), s) in before.iter().zip(&plain).zip(&scaled) {
        assert!((s - b - 0.25 * (p - b)).abs() < 1e-12);
    }
}

#[test]
fn training_lowers_client_dev_perplexity() {
    let cfg = FedConfig { total_rounds: 6, ..fed_cfg(Strategy::FedAvg) };
    let (sim, _) = simulate(&cfg, true);
    assert!(sim.final_mean_dev_ppl().unwrap() < sim.initial_mean_dev_ppl().unwrap());
}

#[test]
fn persona_free_simulation_runs() {
    let (sim, _) = simulate(&fed_cfg(Strategy::FedAvg), false);
    assert_eq!(sim.log.len(), 3);
    assert!(sim.clients.iter().all(|c| c.private_params().unwrap().is_empty()));
}

#[test]
fn client_private_params_hold_only_own_row() {
    let (sim, _) = simulate(&fed_cfg(Strategy::FedAvg), true);
    let c = &sim.clients[1];
    let p = c.private_params().unwrap();
    assert_eq!(p.names_with_tag(ParamTag::Private), vec![PERSONA.to_string()]);
    assert_eq!(p.value(PERSONA).unwrap().row(0), c.model.persona_row(SpeakerId(1)).unwrap());
    let rows: Vec<(SpeakerId, Vec<f64>)> = sim
        .clients
        .iter()
        .map(|c| (c.client_id, c.model.persona_row(c.client_id).unwrap().to_vec()))
        .collect();
    let m = assemble_model(&config(true), sim.server.params(), &rows).unwrap();
    assert_eq!(m.persona_row(SpeakerId(2)).unwrap(), &rows[2].1[..]);
    assert!(m.persona_row(SpeakerId(3)).unwrap().iter().all(|&v| v == 0.0));
}
