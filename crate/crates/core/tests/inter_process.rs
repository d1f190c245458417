use std::os::unix::net::UnixListener;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use isolexec::bench::{
    pub_id, run_experiment_with, sub_id, ExperimentConfig, ProcessMode, CELL_ENV,
};
use isolexec::executors::ExecutorKind;
use isolexec::transport::{Domain, Listener};

#[test]
fn frames_cross_a_socket_between_domains() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("link.sock");
    let listener = UnixListener::bind(&path).unwrap();

    let subscriber = Arc::new(Domain::new());
    let topic = subscriber.register_topic("/chatter").unwrap();
    let queue = subscriber.subscribe(&topic, Some(64)).unwrap();
    queue.attach(Listener::Thread(thread::current())).unwrap();

    let publisher = Domain::new();
    let connect = {
        let subscriber = subscriber.clone();
        let path = path.clone();
        thread::spawn(move || subscriber.connect_publisher(path))
    };
    assert_eq!(
        publisher
            .accept_subscriber(&listener, Duration::from_secs(5))
            .unwrap(),
        1
    );
    connect.join().unwrap().unwrap();

    let id = publisher
        .topic("/chatter")
        .expect("hello registered the topic");
    let mut p = publisher.publisher(&id).unwrap();
    for i in 0u8..10 {
        let s = p.publish(&[i; 32]);
        assert_eq!(s.inter_deliveries, 1);
    }
    let mut got = Vec::new();
    while got.len() < 10 {
        match queue.take() {
            Some(m) => got.push(m.payload[0]),
            None => thread::park_timeout(Duration::from_millis(50)),
        }
    }
    assert_eq!(got, (0..10).collect::<Vec<u8>>());
    assert_eq!(publisher.counters().snapshot().transport_writes, 10);
    assert!(subscriber.counters().snapshot().transport_reads >= 1);

    publisher.shutdown();
    assert!(subscriber.wait_remote_closed(Duration::from_secs(5)));
    subscriber.shutdown();
}

#[test]
fn inter_process_cell_runs_both_nodes() {
    let cfg = ExperimentConfig {
        executor: ExecutorKind::CallbackIsolated,
        n_callbacks: 2,
        process_mode: ProcessMode::Inter,
        duration_s: 5.0,
        warmup_s: 0.5,
        ..Default::default()
    };
    let r = run_experiment_with(&cfg, Path::new(env!("CARGO_BIN_EXE_isolexec"))).unwrap();
    assert!(r.valid, "{:?}", r.problems);
    assert_eq!(r.threads, 4);
    assert_eq!(r.samples.len(), 2);
    let published: u64 = (0..2)
        .map(|i| r.callback(&pub_id(i)).unwrap().window_executions)
        .sum();
    assert!(published > 0);
    assert!(r.report.counters.delivery_crossings() >= published);
    for i in 0..2 {
        assert!(r.callback(&sub_id(i)).unwrap().executions > 0);
    }
}

#[test]
fn subscriber_role_without_cell_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_isolexec"))
        .args(["run", "--role", "subscriber"])
        .env_remove(CELL_ENV)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
