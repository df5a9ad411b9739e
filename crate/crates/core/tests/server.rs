use std::sync::Arc;

use evomerge::oracle::client::RemoteOracle;
use evomerge::oracle::{server, FitnessQuery, LocalOracle, Oracle, OracleError};
use evomerge::synth::{generate_world, SynthSpec};

fn world() -> Arc<evomerge::synth::SynthWorld> {
    let spec = SynthSpec {
        input_dim: 10,
        class_count: 4,
        rank: 2,
        n_adapters: 4,
        n_relevant: 2,
        n_val: 50,
        ..SynthSpec::default()
    };
    Arc::new(generate_world(&spec).unwrap())
}

#[test]
fn concurrent_replies_match_sequential_ones() {
    let world = world();
    let handle = server::serve(world.clone(), "127.0.0.1:0", 4).unwrap();
    let remote = RemoteOracle::new(&handle.endpoint());
    let queries: Vec<FitnessQuery> = (0..20)
        .map(|i| {
            let a = vec![i as f64 / 20.0; 4];
            if i % 2 == 0 {
                FitnessQuery::stage1(format!("r{i}"), a)
            } else {
                FitnessQuery::stage2(format!("r{i}"), a, vec![1.0 - i as f64 / 10.0; 4])
            }
        })
        .collect();
    let sequential: Vec<f64> = queries.iter().map(|q| remote.evaluate(q).unwrap().loss).collect();
    let concurrent: Vec<_> = std::thread::scope(|s| {
        let jobs: Vec<_> = queries.iter().map(|q| s.spawn(|| remote.evaluate(q).unwrap())).collect();
        jobs.into_iter().map(|j| j.join().unwrap()).collect()
    });
    let local = LocalOracle::new(world);
    for ((q, seq), conc) in queries.iter().zip(&sequential).zip(&concurrent) {
        assert_eq!(conc.request_id, q.request_id);
        assert_eq!(conc.loss.to_bits(), seq.to_bits());
        assert_eq!(conc.loss.to_bits(), local.evaluate(q).unwrap().loss.to_bits());
    }
    handle.shutdown();
}

#[test]
fn server_errors_arrive_as_distinct_classes() {
    let handle = server::serve(world(), "127.0.0.1:0", 2).unwrap();
    let remote = RemoteOracle::new(&handle.endpoint());
    let err = remote.evaluate(&FitnessQuery::stage1("x", vec![0.5; 3])).unwrap_err();
    assert!(matches!(&err, OracleError::Server { code, .. } if code == "dim_mismatch"), "{err}");
    let mut q = FitnessQuery::stage1("y", vec![0.5; 4]);
    q.stage = 3;
    let err = remote.evaluate(&q).unwrap_err();
    assert!(matches!(&err, OracleError::Server { code, .. } if code == "bad_stage"), "{err}");
    handle.shutdown();
}

#[test]
fn shutdown_releases_the_port() {
    let handle = server::serve(world(), "127.0.0.1:0", 2).unwrap();
    let addr = handle.addr();
    handle.shutdown();
    let again = server::serve(world(), &addr.to_string(), 2).unwrap();
    again.shutdown();
}
