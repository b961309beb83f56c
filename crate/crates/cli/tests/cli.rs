use std::net::UdpSocket;
use std::process::{Command, Stdio};

fn dopf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dopf"))
}

fn free_port() -> u16 {
    UdpSocket::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

#[test]
fn case_aggregator_and_agents_as_processes() {
    let dir = tempfile::tempdir().unwrap();
    let case = dir.path().join("case.json");
    let out = dopf()
        .args([
            "case",
            "--template",
            "minimal-2",
            "--horizon",
            "12",
            "--out",
        ])
        .arg(&case)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("2 prosumers"));

    let port = free_port();
    let history = dir.path().join("history.csv");
    let aggregator = dopf()
        .args([
            "aggregator",
            "--bind",
            &format!("127.0.0.1:{port}"),
            "--eps-abs",
            "1e-3",
            "--case",
        ])
        .arg(&case)
        .arg("--history")
        .arg(&history)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let agents: Vec<_> = (0..2)
        .map(|h| {
            dopf()
                .args([
                    "agent",
                    "--server",
                    &format!("127.0.0.1:{port}"),
                    "--prosumer-id",
                    &h.to_string(),
                ])
                .arg("--case")
                .arg(&case)
                .stdout(Stdio::piped())
                .stderr(Stdio::null())
                .spawn()
                .unwrap()
        })
        .collect();
    let agg = aggregator.wait_with_output().unwrap();
    let text = String::from_utf8_lossy(&agg.stdout);
    assert!(agg.status.success(), "{text}");
    assert!(text.starts_with("Converged"), "{text}");
    for a in agents {
        let out = a.wait_with_output().unwrap();
        assert!(out.status.success());
        assert!(String::from_utf8_lossy(&out.stdout).contains("Done"));
    }
    let csv = std::fs::read_to_string(&history).unwrap();
    assert!(csv.starts_with("k,r_norm,s_norm"));
    assert!(csv.lines().count() > 2);
}

#[test]
fn sweep_writes_report_and_rejects_bad_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dopf()
        .args([
            "sweep",
            "tolerance",
            "--case",
            "minimal-1",
            "--horizon",
            "8",
            "--eps",
            "1e-2,1e-3",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "sweep.csv",
        "history-eps-1e-2.csv",
        "history-eps-1e-3.csv",
        "k_vs_tolerance.svg",
        "residuals.svg",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    let bad = dopf()
        .args([
            "sweep",
            "tolerance",
            "--case",
            "minimal-1",
            "--horizon",
            "8",
            "--eps",
            "1e-3,1e-2",
            "--out",
        ])
        .arg(dir.path().join("bad"))
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn unknown_template_is_an_error() {
    let out = dopf()
        .args(["case", "--template", "Z", "--out", "x.json"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
