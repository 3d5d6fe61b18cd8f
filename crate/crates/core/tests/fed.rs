use anfr_core::data::{gen_colorshift, labels_tensor, ClientShard, Dataset};
use anfr_core::fed::{
    aggregate, derive_seed, local_train, personalization_filter, run_federation, sample_batch, Aggregation,
    ClientState, Controls, FedConfig, FederationInput, LocalUpdate, ParamSplit, Personalization, ServerState,
};
use anfr_core::nn::{build_model, Architecture, Mode, ModelSpec, NamedParams};
use anfr_core::tensor::{LossKind, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(arch: Architecture) -> ModelSpec {
    ModelSpec {
        widths: vec![4, 8],
        depths: vec![1, 1],
        image_size: 8,
        norm_groups: 2,
        ..ModelSpec::new(arch)
    }
}

fn data(clients: usize) -> (Dataset, Vec<ClientShard>, Vec<usize>) {
    let (ds, shards) = gen_colorshift(clients, 4, 24, 0.9, 8, 11).unwrap();
    let test: Vec<usize> = (0..ds.len()).step_by(3).collect();
    (ds, shards, test)
}

fn cfg(agg: Aggregation) -> FedConfig {
    FedConfig {
        rounds: 2,
        local_steps: 2,
        batch_size: 8,
        aggregation: agg,
        seed: 5,
        ..Default::default()
    }
}

fn bits(p: &NamedParams) -> Vec<u64> {
    p.values().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect()
}

fn input<'a>(ds: &'a Dataset, shards: &'a [ClientShard], test: &'a [usize]) -> FederationInput<'a> {
    FederationInput {
        data: ds,
        shards,
        test,
        client_test: None,
    }
}

fn random_params(rng: &mut ChaCha8Rng) -> NamedParams {
    let mut p = NamedParams::new();
    p.insert("a".into(), Tensor::randn(&[3, 2], 1.0, rng).unwrap());
    p.insert("b".into(), Tensor::randn(&[4], 1.0, rng).unwrap());
    p
}

#[test]
fn test_fedavg_matches_brute_force_weighted_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let ups: Vec<LocalUpdate> = (0..5)
            .map(|i| LocalUpdate::new(i, random_params(&mut rng), rng.random_range(1..100)))
            .collect();
        let total: usize = ups.iter().map(|u| u.num_samples).sum();
        let mut server = ServerState::new(random_params(&mut rng));
        let split = ParamSplit::all_shared(["a".to_string(), "b".to_string()]);
        aggregate(&ups, &cfg(Aggregation::FedAvg), &split, &mut server).unwrap();
        for name in ["a", "b"] {
            for j in 0..server.global[name].numel() {
                let oracle: f64 = ups
                    .iter()
                    .map(|u| u.num_samples as f64 / total as f64 * u.params[name].data()[j])
                    .sum();
                assert!((server.global[name].data()[j] - oracle).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn test_fedadam_matches_standalone_adam() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = FedConfig {
        server_lr: 0.05,
        ..cfg(Aggregation::FedAdam)
    };
    let split = ParamSplit::all_shared(["a".to_string(), "b".to_string()]);
    let init = random_params(&mut rng);
    let mut server = ServerState::new(init.clone());
    let mut theta: Vec<f64> = init.values().flat_map(|t| t.data().to_vec()).collect();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    for _ in 0..3 {
        let ups: Vec<LocalUpdate> = (0..3)
            .map(|i| LocalUpdate::new(i, random_params(&mut rng), 10 * (i + 1)))
            .collect();
        let flat: Vec<Vec<f64>> = ups
            .iter()
            .map(|u| u.params.values().flat_map(|t| t.data().to_vec()).collect())
            .collect();
        for j in 0..theta.len() {
            let mean = (10.0 * flat[0][j] + 20.0 * flat[1][j] + 30.0 * flat[2][j]) / 60.0;
            let g = theta[j] - mean;
            m[j] = 0.9 * m[j] + 0.1 * g;
            v[j] = 0.99 * v[j] + 0.01 * g * g;
            theta[j] -= 0.05 * m[j] / (v[j].sqrt() + 1e-3);
        }
        aggregate(&ups, &c, &split, &mut server).unwrap();
        let got: Vec<f64> = server.global.values().flat_map(|t| t.data().to_vec()).collect();
        for (a, b) in got.iter().zip(&theta) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn test_personalization_filter_cases() {
    let anfr = build_model(&toy(Architecture::Anfr), 0).unwrap();
    let none = personalization_filter(Personalization::None, &anfr).unwrap();
    assert!(none.personal.is_empty());
    assert_eq!(none.shared.len(), anfr.params().len());

    let per = personalization_filter(Personalization::FedPer, &anfr).unwrap();
    assert_eq!(per.personal, vec!["head.weight".to_string(), "head.bias".to_string()]);
    for n in anfr.params().keys() {
        assert!(per.shared.contains(n) ^ per.personal.contains(n));
    }

    let gn = build_model(&toy(Architecture::GnResnet), 0).unwrap();
    assert!(personalization_filter(Personalization::FedBn, &gn).is_err());

    let bn = build_model(&toy(Architecture::BnResnet), 0).unwrap();
    let fbn = personalization_filter(Personalization::FedBn, &bn).unwrap();
    assert!(!fbn.personal.is_empty());
    for n in &fbn.personal {
        assert!(n.contains("norm"), "{n}");
    }
    assert!(fbn.personal.iter().any(|n| n.ends_with("running_var")));
}

#[test]
fn test_zero_local_steps_returns_global() {
    let (ds, shards, _) = data(2);
    let model = build_model(&toy(Architecture::Anfr), 1).unwrap();
    let c = FedConfig {
        local_steps: 0,
        ..cfg(Aggregation::FedAvg)
    };
    let mut client = ClientState::new(shards[0].clone());
    let split = ParamSplit::all_shared(model.params().keys().cloned());
    let up = local_train(&model, &mut client, model.params(), &split, &ds, &c, 1, None, None).unwrap();
    assert_eq!(bits(&up.params), bits(model.params()));
}

#[test]
fn test_fedprox_zero_mu_matches_fedavg_bitwise() {
    let (ds, shards, test) = data(3);
    let spec = toy(Architecture::Anfr);
    let a = run_federation(&spec, &input(&ds, &shards, &test), &cfg(Aggregation::FedAvg), None).unwrap();
    let prox = FedConfig {
        prox_mu: 0.0,
        ..cfg(Aggregation::FedProx)
    };
    let b = run_federation(&spec, &input(&ds, &shards, &test), &prox, None).unwrap();
    assert_eq!(bits(a.global.params()), bits(b.global.params()));
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!(x.without_timing(), y.without_timing());
    }
}

#[test]
fn test_scaffold_identical_clients_matches_fedavg_bitwise() {
    let (ds, shards, _) = data(1);
    let same: Vec<ClientShard> = (0..3)
        .map(|i| ClientShard::new(i, shards[0].indices.clone(), &ds.labels, ds.num_classes))
        .collect();
    let model = build_model(&toy(Architecture::Anfr), 5).unwrap();
    let run = |agg: Aggregation| {
        let c = cfg(agg);
        let split = personalization_filter(Personalization::None, &model).unwrap();
        let mut server = ServerState::new(model.params().clone());
        if agg == Aggregation::Scaffold {
            server.init_controls(&model.trainable_names(), 3).unwrap();
        }
        let mut clients: Vec<ClientState> = same
            .iter()
            .map(|s| {
                let mut cs = ClientState::new(s.clone());
                cs.rng_stream = 0;
                cs
            })
            .collect();
        for round in 1..=3 {
            let global = server.global.clone();
            let mut ups = Vec::new();
            for cl in clients.iter_mut() {
                let controls = server.control.as_ref().map(|sc| Controls {
                    server: sc,
                    client: &server.client_controls[cl.client_id],
                });
                ups.push(local_train(&model, cl, &global, &split, &ds, &c, round, controls, None).unwrap());
            }
            aggregate(&ups, &c, &split, &mut server).unwrap();
            if agg == Aggregation::Scaffold {
                let cs = server.control.as_ref().unwrap();
                for ci in &server.client_controls {
                    assert_eq!(bits(ci), bits(cs));
                }
            }
        }
        server.global
    };
    assert_eq!(bits(&run(Aggregation::FedAvg)), bits(&run(Aggregation::Scaffold)));
}

#[test]
fn test_scaffold_server_control_is_client_mean() {
    let (ds, shards, test) = data(3);
    let r = run_federation(
        &toy(Architecture::GnResnet),
        &input(&ds, &shards, &test),
        &cfg(Aggregation::Scaffold),
        None,
    )
    .unwrap();
    let c = r.server.control.as_ref().unwrap();
    let mut nonzero = false;
    for (name, t) in c {
        for j in 0..t.numel() {
            let mean: f64 = r.server.client_controls.iter().map(|ci| ci[name.as_str()].data()[j]).sum::<f64>() / 3.0;
            assert!((t.data()[j] - mean).abs() < 1e-12);
            nonzero |= t.data()[j] != 0.0;
        }
    }
    assert!(nonzero);
}

fn personal_bits(p: &NamedParams, names: &[String]) -> Vec<u64> {
    names
        .iter()
        .flat_map(|n| p[n.as_str()].data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn test_personal_parameters_untouched_by_aggregation() {
    let (ds, shards, _) = data(3);
    for (arch, agg) in [
        (Architecture::Anfr, Aggregation::FedPer),
        (Architecture::BnResnet, Aggregation::FedBn),
    ] {
        let model = build_model(&toy(arch), 2).unwrap();
        let c = cfg(agg);
        let split = personalization_filter(agg.personalization(), &model).unwrap();
        let mut server = ServerState::new(model.params().clone());
        let mut clients: Vec<ClientState> = shards.iter().map(|s| ClientState::new(s.clone())).collect();
        let global = server.global.clone();
        let ups: Vec<LocalUpdate> = clients
            .iter_mut()
            .map(|cl| local_train(&model, cl, &global, &split, &ds, &c, 1, None, None).unwrap())
            .collect();
        let before: Vec<Vec<u64>> = clients.iter().map(|cl| bits(&cl.personal)).collect();
        let server_before = personal_bits(&server.global, &split.personal);
        aggregate(&ups, &c, &split, &mut server).unwrap();
        let after: Vec<Vec<u64>> = clients.iter().map(|cl| bits(&cl.personal)).collect();
        assert_eq!(before, after);
        assert_eq!(server_before, personal_bits(&server.global, &split.personal), "{agg}");
        assert_ne!(before[0], before[1]);
    }
}

/// Independent centralized SGD over the same batch schedule.
fn centralized(spec: &ModelSpec, ds: &Dataset, indices: &[usize], c: &FedConfig) -> (NamedParams, Vec<f64>) {
    let mut model = build_model(spec, c.seed).unwrap();
    let mut losses = Vec::new();
    for round in 1..=c.rounds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, &[0, round as u64]));
        let mut round_loss = Vec::new();
        for _ in 0..c.local_steps {
            let batch = sample_batch(indices, c.batch_size, &mut rng);
            let (x, y) = ds.gather(&batch).unwrap();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let xv = tape.constant(x);
            let f = model.forward(&mut tape, &bound, xv, Mode::Train).unwrap();
            let l = tape.loss(f.logits, &labels_tensor(&y).unwrap(), LossKind::CrossEntropy, None).unwrap();
            round_loss.push(tape.value(l).item());
            tape.backward(l).unwrap();
            let mut next = model.params().clone();
            for (name, v) in bound.iter() {
                let g = tape.grad_or_zeros(*v);
                for (pi, gi) in next.get_mut(name).unwrap().data_mut().iter_mut().zip(g.data()) {
                    *pi -= c.optimizer.lr * gi;
                }
            }
            model.load(&next).unwrap();
        }
        losses.push(round_loss.iter().sum::<f64>() / round_loss.len() as f64);
    }
    (model.params().clone(), losses)
}

#[test]
fn test_single_client_matches_centralized_training() {
    let (ds, shards, test) = data(1);
    let spec = toy(Architecture::Anfr);
    let c = FedConfig {
        rounds: 3,
        local_steps: 3,
        ..cfg(Aggregation::FedAvg)
    };
    let fed = run_federation(&spec, &input(&ds, &shards, &test), &c, None).unwrap();
    let (params, losses) = centralized(&spec, &ds, &shards[0].indices, &c);
    assert_eq!(bits(fed.global.params()), bits(&params));
    let fed_losses: Vec<f64> = fed.metrics.iter().map(|m| m.client_loss[0].1).collect();
    assert_eq!(fed_losses, losses);
}

#[test]
fn test_single_step_equals_one_sgd_step() {
    let (ds, shards, test) = data(1);
    let spec = toy(Architecture::GnResnet);
    let c = FedConfig {
        rounds: 1,
        local_steps: 1,
        ..cfg(Aggregation::FedAvg)
    };
    let fed = run_federation(&spec, &input(&ds, &shards, &test), &c, None).unwrap();
    let (params, _) = centralized(&spec, &ds, &shards[0].indices, &c);
    assert_eq!(bits(fed.global.params()), bits(&params));
}

#[test]
fn test_zero_rounds_returns_initial_model() {
    let (ds, shards, test) = data(2);
    let c = FedConfig {
        rounds: 0,
        ..cfg(Aggregation::FedAvg)
    };
    let r = run_federation(&toy(Architecture::NfResnet), &input(&ds, &shards, &test), &c, None).unwrap();
    assert!(r.metrics.is_empty());
    assert_eq!(bits(r.global.params()), bits(r.initial.params()));
}

#[test]
fn test_worker_count_does_not_change_results() {
    let (ds, shards, test) = data(4);
    let client_test: Vec<Vec<usize>> = shards.iter().map(|s| s.indices[..6].to_vec()).collect();
    let inp = FederationInput {
        data: &ds,
        shards: &shards,
        test: &test,
        client_test: Some(&client_test),
    };
    let spec = toy(Architecture::Anfr);
    let base = FedConfig {
        participation: 0.5,
        ..cfg(Aggregation::FedPer)
    };
    let a = run_federation(&spec, &inp, &base, None).unwrap();
    let b = run_federation(&spec, &inp, &FedConfig { workers: 3, ..base.clone() }, None).unwrap();
    let a2 = run_federation(&spec, &inp, &base, None).unwrap();
    for ((x, y), z) in a.metrics.iter().zip(&b.metrics).zip(&a2.metrics) {
        assert_eq!(x.without_timing(), y.without_timing());
        assert_eq!(x.without_timing(), z.without_timing());
        assert_eq!(x.client_loss.len(), 2);
        assert!(x.best_local_accuracy.is_some());
    }
    assert_eq!(bits(a.global.params()), bits(b.global.params()));
}

#[test]
fn test_large_prox_mu_shrinks_drift() {
    let (ds, shards, _) = data(3);
    let model = build_model(&toy(Architecture::Anfr), 4).unwrap();
    let split = ParamSplit::all_shared(model.params().keys().cloned());
    let drift = |agg: Aggregation, mu: f64, shard: &ClientShard| {
        let c = FedConfig {
            prox_mu: mu,
            local_steps: 5,
            optimizer: anfr_core::optim::OptimizerConfig {
                lr: 1e-4,
                ..Default::default()
            },
            ..cfg(agg)
        };
        let mut cl = ClientState::new(shard.clone());
        let up = local_train(&model, &mut cl, model.params(), &split, &ds, &c, 1, None, None).unwrap();
        up.params
            .iter()
            .map(|(n, t)| {
                t.data()
                    .iter()
                    .zip(model.params()[n.as_str()].data())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    };
    for s in &shards {
        let free = drift(Aggregation::FedAvg, 0.0, s);
        let held = drift(Aggregation::FedProx, 1e3, s);
        assert!(held < free, "client {}: {held} >= {free}", s.client_id);
    }
}

#[test]
fn test_fedbn_on_group_norm_rejected_by_driver() {
    let (ds, shards, test) = data(2);
    let r = run_federation(
        &toy(Architecture::GnResnet),
        &input(&ds, &shards, &test),
        &cfg(Aggregation::FedBn),
        None,
    );
    assert!(r.is_err());
}

#[test]
fn test_nan_loss_aborts_with_diagnostic() {
    let (ds, shards, _) = data(1);
    let mut model = build_model(&toy(Architecture::GnResnet), 0).unwrap();
    let dims = model.params()["head.bias"].dims().to_vec();
    model.set_param("head.bias", Tensor::full(&dims, f64::NAN).unwrap()).unwrap();
    let split = ParamSplit::all_shared(model.params().keys().cloned());
    let mut cl = ClientState::new(shards[0].clone());
    let err = local_train(&model, &mut cl, model.params(), &split, &ds, &cfg(Aggregation::FedAvg), 1, None, None)
        .unwrap_err();
    assert!(err.to_string().contains("non-finite loss on client 0"), "{err}");
}
