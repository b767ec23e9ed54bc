//! The command sequence of a deployment, run in-process.

use std::path::Path;

use ppir::cli::run;
use ppir::error::Result;

fn ppir(args: &[&str]) -> Result<String> {
    let mut out = Vec::new();
    run(std::iter::once("ppir").chain(args.iter().copied()), &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

const DEMO: &str = "index = hkm\nk = 4\nleaf_max = 3\ns = 4\nm = 2\ncorpus.n = 8\ncorpus.classes = 2\ncorpus.queries = 3\n";

fn prepare(cfg: &str, dir: &Path) -> String {
    let c = dir.join("session.conf");
    std::fs::write(&c, cfg).unwrap();
    let (c, d) = (c.to_str().unwrap().to_string(), dir.to_str().unwrap());
    ppir(&["owner-outsource", "--config", &c, "--dir", d]).unwrap();
    ppir(&["dealer-gen", "--config", &c, "--dir", d, "--count", "3"]).unwrap();
    c
}

fn full_flow(cfg: &str, dir: &Path) -> String {
    let c = prepare(cfg, dir);
    let d = dir.to_str().unwrap();
    ppir(&["server-run", "--config", &c, "--dir", d, "--party", "both", "--op", "build"]).unwrap();
    ppir(&["user-query", "--config", &c, "--dir", d, "--phase", "trapdoor"]).unwrap();
    ppir(&["server-run", "--config", &c, "--dir", d, "--party", "both", "--op", "query"]).unwrap();
    ppir(&["user-query", "--config", &c, "--dir", d, "--phase", "decrypt"]).unwrap();
    ppir(&["oracle-run", "--config", &c, "--dir", d]).unwrap();
    let secure = dir.join("p1/decisions.json");
    let oracle = dir.join("oracle/decisions.json");
    ppir(&["verify-equivalence", "--secure", secure.to_str().unwrap(), "--oracle", oracle.to_str().unwrap()]).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "session.conf" {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn demo_flow_passes_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(full_flow(DEMO, a.path()), "pca: PASS\nindex: PASS\nquery: PASS\n");
    full_flow(DEMO, b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.len() > 20);
    assert_eq!(ta, tb);

    // results decrypt to the stored images
    let results: Vec<Vec<u32>> = serde_json::from_str(&std::fs::read_to_string(a.path().join("user/results.json")).unwrap()).unwrap();
    let stored = ppir::pipeline::load_images(&a.path().join("owner/images.assh")).unwrap();
    for (q, ids) in results.iter().enumerate() {
        assert_eq!(ids.len(), 2);
        let got = ppir::pipeline::load_images(&a.path().join(format!("user/images/q{q:03}.assh"))).unwrap();
        for (g, &id) in got.iter().zip(ids) {
            assert_eq!(g.pixels, stored[id as usize].pixels);
        }
    }
    let report = ppir(&["meter-report", "--dir", a.path().to_str().unwrap()]).unwrap();
    assert!(report.contains("stage,protocol_tag,rounds,bytes"));
}

#[test]
fn lsh_flow_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = format!("{DEMO}index = lsh\ntransport = tcp\naddr = 127.0.0.1:{port}\n").replace("index = hkm\n", "");
    let c = prepare(&cfg, dir.path());
    let d = dir.path().to_str().unwrap().to_string();
    for op in ["build", "query"] {
        if op == "query" {
            ppir(&["user-query", "--config", &c, "--dir", &d, "--phase", "trapdoor"]).unwrap();
        }
        let (c2, d2) = (c.clone(), d.clone());
        let h = std::thread::spawn(move || ppir(&["server-run", "--config", &c2, "--dir", &d2, "--party", "2", "--op", op]));
        ppir(&["server-run", "--config", &c, "--dir", &d, "--party", "1", "--op", op]).unwrap();
        h.join().unwrap().unwrap();
    }
    ppir(&["oracle-run", "--config", &c, "--dir", &d]).unwrap();
    let s = dir.path().join("p2/decisions.json");
    let o = dir.path().join("oracle/decisions.json");
    ppir(&["verify-equivalence", "--secure", s.to_str().unwrap(), "--oracle", o.to_str().unwrap()]).unwrap();
}

#[test]
fn mismatched_configs_fail_the_handshake() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = format!("{DEMO}transport = tcp\naddr = 127.0.0.1:{port}\n");
    let c = prepare(&cfg, dir.path());
    let other = dir.path().join("other.conf");
    std::fs::write(&other, cfg.replace("m = 2", "m = 3")).unwrap();
    let d = dir.path().to_str().unwrap().to_string();
    let (o, d2) = (other.to_str().unwrap().to_string(), d.clone());
    let h = std::thread::spawn(move || ppir(&["server-run", "--config", &o, "--dir", &d2, "--party", "2", "--op", "build"]));
    let e = ppir(&["server-run", "--config", &c, "--dir", &d, "--party", "1", "--op", "build"]).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert_eq!(h.join().unwrap().unwrap_err().exit_code(), 2);
}
