use std::net::SocketAddr;
use std::thread;
use std::time::Duration;

use dopf_core::admm::{run_admm, AdmmConfig, AdmmStatus, InProcessBackend};
use dopf_core::model::{build_case, Case, Horizon, Template};
use dopf_core::runtime::{
    agent_run, aggregator_serve, AgentConfig, AgentExit, AggregatorConfig, Latency, LinkModel,
};

fn loopback() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn spawn_agents(
    server: SocketAddr,
    case: &Case,
    cfg: AgentConfig,
) -> Vec<thread::JoinHandle<dopf_core::runtime::AgentReport>> {
    (0..case.n_prosumers() as u16)
        .map(|h| {
            let (case, cfg) = (case.clone(), cfg.clone());
            thread::spawn(move || agent_run(server, h, &case, &cfg).unwrap())
        })
        .collect()
}

fn quick_agent() -> AgentConfig {
    AgentConfig {
        hello_interval: Duration::from_millis(50),
        idle_timeout: Duration::from_secs(20),
        ..AgentConfig::default()
    }
}

#[test]
fn remote_run_matches_quantized_in_process_run() {
    let case = build_case(Template::Minimal(2), Horizon::t1(), 3).unwrap();
    let admm = AdmmConfig::new(1e-4);
    let mut local =
        InProcessBackend::new(&case, 1, admm.subproblem_tol).with_wire_quantization(true);
    let expected = run_admm(&case, &admm, &mut local).unwrap();

    let server = aggregator_serve(loopback(), &case, AggregatorConfig::new(admm)).unwrap();
    let agents = spawn_agents(server.local_addr(), &case, quick_agent());
    let remote = server.join().unwrap();
    for a in agents {
        let report = a.join().unwrap();
        assert_eq!(report.exit, AgentExit::Done);
        assert_eq!(report.failed_solves, 0);
    }

    assert_eq!(remote.status, expected.status);
    assert_eq!(remote.history.len(), expected.history.len());
    for (a, b) in remote.history.iter().zip(&expected.history) {
        assert_eq!(a.r_norm, b.r_norm, "k={}", a.k);
        assert_eq!(a.s_norm, b.s_norm, "k={}", a.k);
        assert_eq!(a.bytes_down, 2 * 412);
        assert_eq!(a.bytes_up, 2 * 216);
    }
    assert_eq!(remote.state, expected.state);
}

#[test]
fn lossy_links_are_recovered_by_retransmission() {
    let case = build_case(Template::Minimal(2), Horizon::over_day(12).unwrap(), 5).unwrap();
    let admm = AdmmConfig::new(1e-3);
    let lossy = |seed| LinkModel {
        latency: Latency::Uniform {
            lo_ms: 0.0,
            hi_ms: 2.0,
        },
        loss: 0.2,
        seed,
    };
    let mut cfg = AggregatorConfig::new(admm.clone());
    cfg.initial_rto = Duration::from_millis(100);
    cfg.max_attempts = 10;
    cfg.link = Some(lossy(1));
    let server = aggregator_serve(loopback(), &case, cfg).unwrap();
    let agent_cfg = AgentConfig {
        link: Some(lossy(2)),
        idle_timeout: Duration::from_secs(5),
        ..quick_agent()
    };
    let agents = spawn_agents(server.local_addr(), &case, agent_cfg);
    let remote = server.join().unwrap();
    for a in agents {
        a.join().unwrap();
    }

    let mut local =
        InProcessBackend::new(&case, 1, admm.subproblem_tol).with_wire_quantization(true);
    let expected = run_admm(&case, &admm, &mut local).unwrap();
    assert_eq!(remote.status, AdmmStatus::Converged);
    assert_eq!(remote.iterations(), expected.iterations());
    assert_eq!(remote.state, expected.state);
    // Retransmissions show up in the byte counts.
    let sent: u64 = remote.history.iter().map(|r| r.bytes_down).sum();
    let targets_len = 20 + 4 * 25 + 4;
    assert!(
        sent > remote.history.len() as u64 * 2 * targets_len,
        "{sent}"
    );
}

#[test]
fn silent_agent_is_reported_as_transport_failure() {
    let case = build_case(Template::Minimal(2), Horizon::over_day(12).unwrap(), 5).unwrap();
    let mut cfg = AggregatorConfig::new(AdmmConfig::new(1e-3));
    cfg.initial_rto = Duration::from_millis(30);
    cfg.max_attempts = 3;
    let server = aggregator_serve(loopback(), &case, cfg).unwrap();
    let addr = server.local_addr();
    let good = {
        let case = case.clone();
        thread::spawn(move || {
            let cfg = AgentConfig {
                idle_timeout: Duration::from_secs(2),
                ..quick_agent()
            };
            agent_run(addr, 0, &case, &cfg).unwrap()
        })
    };
    // Agent 1 registers and then goes away.
    let ghost = std::net::UdpSocket::bind(loopback()).unwrap();
    let hello =
        dopf_core::runtime::wire::Frame::control(dopf_core::runtime::wire::Kind::Hello, 0, 1, 0);
    ghost
        .send_to(&dopf_core::runtime::wire::encode(&hello).unwrap(), addr)
        .unwrap();

    let result = server.join().unwrap();
    assert_eq!(result.status, AdmmStatus::TransportFailure { agent: 1 });
    assert_eq!(good.join().unwrap().exit, AgentExit::Idle);
}

#[test]
fn registration_times_out_with_missing_agents() {
    let case = build_case(Template::Minimal(3), Horizon::over_day(12).unwrap(), 5).unwrap();
    let mut cfg = AggregatorConfig::new(AdmmConfig::new(1e-3));
    cfg.registration_timeout = Duration::from_millis(200);
    let server = aggregator_serve(loopback(), &case, cfg).unwrap();
    match server.join() {
        Err(dopf_core::runtime::RuntimeError::Registration { missing }) => {
            assert_eq!(missing, vec![0, 1, 2])
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn agent_rejects_unknown_id() {
    let case = build_case(Template::Minimal(2), Horizon::over_day(12).unwrap(), 5).unwrap();
    let err = agent_run(loopback(), 5, &case, &quick_agent()).unwrap_err();
    assert!(err.to_string().contains("out of range"), "{err}");
}

mod fake_aggregator {
    use std::net::UdpSocket;
    use std::thread;
    use std::time::Duration;

    use dopf_core::admm::solve_prosumer;
    use dopf_core::kernel::SolveOptions;
    use dopf_core::model::{build_case, Case, Horizon, Template};
    use dopf_core::runtime::wire::{decode, encode, Frame, Kind};
    use dopf_core::runtime::{agent_run, AgentExit, AgentReport};

    const RUN: u64 = 0x5eed;

    fn recv(sock: &UdpSocket) -> (Frame, std::net::SocketAddr) {
        let mut buf = [0u8; 2048];
        let (n, from) = sock.recv_from(&mut buf).unwrap();
        (decode(&buf[..n]).unwrap(), from)
    }

    /// Binds a socket, starts agent 0 against it and completes registration.
    fn join(
        case: &Case,
    ) -> (
        UdpSocket,
        std::net::SocketAddr,
        thread::JoinHandle<AgentReport>,
    ) {
        let sock = UdpSocket::bind("127.0.0.1:0").unwrap();
        sock.set_read_timeout(Some(Duration::from_secs(10)))
            .unwrap();
        let addr = sock.local_addr().unwrap();
        let agent = {
            let case = case.clone();
            let cfg = super::quick_agent();
            thread::spawn(move || agent_run(addr, 0, &case, &cfg).unwrap())
        };
        let (hello, from) = recv(&sock);
        assert_eq!(hello.kind, Kind::Hello);
        sock.send_to(
            &encode(&Frame::control(Kind::Assign, RUN, 0, 0)).unwrap(),
            from,
        )
        .unwrap();
        (sock, from, agent)
    }

    fn finish(sock: &UdpSocket, to: std::net::SocketAddr, k: u32) {
        sock.send_to(&encode(&Frame::control(Kind::Done, RUN, 0, k)).unwrap(), to)
            .unwrap();
        loop {
            let (f, _) = recv(sock);
            if f.kind == Kind::Done {
                assert_eq!(f.iteration, k);
                return;
            }
        }
    }

    #[test]
    fn done_before_any_targets_exits_cleanly() {
        let case = build_case(Template::Minimal(1), Horizon::over_day(12).unwrap(), 1).unwrap();
        let (sock, to, agent) = join(&case);
        finish(&sock, to, 0);
        let report = agent.join().unwrap();
        assert_eq!(report.exit, AgentExit::Done);
        assert_eq!(report.run_id, RUN);
        assert_eq!(report.solves, 0);
        assert_eq!(report.last_iteration, None);
    }

    #[test]
    fn garbage_is_ignored_and_huge_penalty_echoes_the_targets() {
        let case = build_case(Template::Minimal(1), Horizon::t1(), 4).unwrap();
        let nt = case.n_steps();
        let opts = SolveOptions::with_tol(1e-9);
        let feasible =
            solve_prosumer(&case, 0, 0.0, &vec![0.0; nt], &vec![0.0; nt], &opts).unwrap();
        let (sock, to, agent) = join(&case);

        let targets = Frame::targets(RUN, 0, 1, 1e6, &vec![0.0; nt], &feasible);
        let good = encode(&targets).unwrap();
        let mut flipped = good.clone();
        flipped[40] ^= 0x10;
        let wrong_run = encode(&Frame::targets(
            RUN + 1,
            0,
            1,
            1.0,
            &vec![0.0; nt],
            &feasible,
        ))
        .unwrap();
        for junk in [
            vec![],
            vec![0xff; 7],
            good[..100].to_vec(),
            flipped,
            wrong_run,
            vec![1; 412],
        ] {
            sock.send_to(&junk, to).unwrap();
        }
        sock.send_to(&good, to).unwrap();
        let (reply, _) = recv(&sock);
        assert_eq!(reply.kind, Kind::Profile);
        assert_eq!(reply.iteration, 1);
        let p = reply.values();
        assert_eq!(p.len(), nt);
        for (a, b) in p.iter().zip(&feasible) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }

        // A duplicate is answered from the cache without a second solve.
        sock.send_to(&good, to).unwrap();
        let (again, _) = recv(&sock);
        assert_eq!(again, reply);
        finish(&sock, to, 1);
        let report = agent.join().unwrap();
        assert_eq!(
            (report.exit, report.solves, report.failed_solves),
            (AgentExit::Done, 1, 0)
        );
    }
}
