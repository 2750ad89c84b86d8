use std::net::TcpListener;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use splitadapt::config::{ExperimentConfig, TransportKind};
use splitadapt::experiment::{run_sa, server_side, session_id, ClientTask, ServerSide};
use splitadapt::session::{run_session, serve};
use splitadapt::transport::{channel_pair, TcpTransport};
use splitadapt_core::protocol::{client_session, params_hash, serve_session, Endpoint, Hello, Message, Phase, Tag};

const TIMEOUT: Duration = Duration::from_secs(20);

fn tiny() -> &'static (tempfile::TempDir, ExperimentConfig, ServerSide) {
    static SIDE: OnceLock<(tempfile::TempDir, ExperimentConfig, ServerSide)> = OnceLock::new();
    SIDE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig { output_dir: dir.path().to_path_buf(), ..ExperimentConfig::default() };
        for kv in [
            "model.embed_dim=16",
            "model.num_heads=2",
            "model.mlp_hidden=24",
            "model.num_layers=4",
            "model.split=3",
            "server.per_class=12",
            "server.pretrain_epochs=1",
            "server.calib_samples=8",
            "client.pool_per_class=6",
            "client.test_per_class=4",
            "client.n_aug=2",
            "adapt.epochs=2",
            "adapt.shots=2",
        ] {
            cfg.apply_override(kv).unwrap();
        }
        let side = server_side(&cfg).unwrap();
        (dir, cfg, side)
    })
}

#[test]
fn transports_agree_on_a_small_session() {
    let (_, cfg, side) = tiny();
    let (a, chan) = run_sa(cfg, &side.state, 2, 5, TransportKind::Channel).unwrap();
    let (b, tcp) = run_sa(cfg, &side.state, 2, 5, TransportKind::Tcp).unwrap();
    assert!(chan.server.completed());
    assert_eq!(chan.server, tcp.server);
    assert_eq!(chan.wire, tcp.wire);
    assert_eq!(a.accuracy, b.accuracy);
    // 3 copies of 8 samples, batch 32: one cycle per epoch
    assert_eq!(chan.server.copies, 3);
    assert_eq!(chan.server.cycles, 2);
    assert_eq!(chan.server.epoch_losses.len(), 2);
    assert_eq!(chan.client.accuracy, chan.server.accuracy);
}

#[test]
fn client_abort_after_package_discards_adaptation() {
    let (_, cfg, side) = tiny();
    let (s, c) = channel_pair(8, TIMEOUT);
    let state = &side.state;
    let report = std::thread::scope(|scope| {
        let h = scope.spawn(|| serve_session(s, state, &cfg.adapt_config(1)));
        let mut ep = Endpoint::new(c, Some(77));
        let hello = Hello { spec_hash: cfg.spec.hash(), seed: 1, classes: 4, train_samples: 8, copies: 1 };
        ep.send(&Message::Hello(hello)).unwrap();
        assert_eq!(ep.recv().unwrap().tag(), Tag::Hello);
        assert_eq!(ep.recv().unwrap().tag(), Tag::FrontendPackage);
        ep.send_error("client gave up");
        h.join().unwrap()
    });
    assert_eq!(report.phase, Phase::Aborted);
    assert_eq!(report.session, 77);
    assert!(report.abort_reason.as_deref().unwrap().contains("client gave up"));
    assert_eq!(report.accuracy, None);
    assert_eq!(report.param_hash, params_hash(state.backend.tensors()));
}

#[test]
fn wrong_model_spec_is_refused() {
    let (_, cfg, side) = tiny();
    let (s, c) = channel_pair(8, TIMEOUT);
    let task = ClientTask::new(cfg, 2, 3).unwrap();
    let other = splitadapt_core::vit::ModelSpec { embed_dim: 32, num_heads: 4, ..cfg.spec };
    let (report, client) = std::thread::scope(|scope| {
        let h = scope.spawn(|| serve_session(s, &side.state, &cfg.adapt_config(3)));
        let client = client_session(c, 5, &other, &cfg.client_config(3), &task.data());
        (h.join().unwrap(), client)
    });
    assert_eq!(report.phase, Phase::Aborted);
    assert!(report.abort_reason.unwrap().contains("spec hash"));
    let err = client.unwrap_err().to_string();
    assert!(err.contains("spec hash"), "{err}");
}

#[test]
fn server_loop_handles_concurrent_clients() {
    let (_, cfg, side) = tiny();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let state = Arc::new(side.state.clone());
    let adapt = cfg.adapt_config(0);
    let server = std::thread::spawn(move || serve(listener, state, adapt, 2, Some(3), TIMEOUT, |_| {}));
    let clients: Vec<_> = [11u64, 12, 13]
        .into_iter()
        .map(|seed| {
            let cfg = cfg.clone();
            std::thread::spawn(move || {
                let task = ClientTask::new(&cfg, 2, seed).unwrap();
                let t = TcpTransport::connect(addr, TIMEOUT).unwrap();
                client_session(t, session_id(2, seed), &cfg.spec, &cfg.client_config(seed), &task.data()).unwrap()
            })
        })
        .collect();
    let mut client_sessions: Vec<u64> = clients.into_iter().map(|h| h.join().unwrap().session).collect();
    let reports = server.join().unwrap().unwrap();
    let mut served: Vec<u64> = reports.iter().filter(|r| r.completed()).map(|r| r.session).collect();
    client_sessions.sort();
    served.sort();
    assert_eq!(served, client_sessions);
}

#[test]
fn in_process_session_matches_run_session() {
    let (_, cfg, side) = tiny();
    let task = ClientTask::new(cfg, 2, 9).unwrap();
    let out = run_session(
        TransportKind::Channel,
        &side.state,
        &cfg.adapt_config(9),
        session_id(2, 9),
        &cfg.client_config(9),
        &task.data(),
        TIMEOUT,
    )
    .unwrap();
    let (row, again) = run_sa(cfg, &side.state, 2, 9, TransportKind::Channel).unwrap();
    assert_eq!(out.server, again.server);
    assert_eq!(row.accuracy, out.server.accuracy);
}
