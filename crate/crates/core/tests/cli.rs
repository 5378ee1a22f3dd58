use std::path::Path;
use std::process::{Command, Output};

use hikonv::qtensor::{read_file, write_file, QTensor};

fn hikonv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hikonv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn search_examples() {
    let cases = [
        (["27", "18", "1", "1"], "n=9 k=4 s=3 gb=2 ops=60"),
        (["27", "18", "4", "4"], "ops=8"),
        (["27", "18", "8", "8"], "ops=2"),
        (["32", "32", "4", "4"], "ops=13"),
        (["32", "32", "8", "8"], "ops=5"),
    ];
    for ([a, b, p, q], want) in cases {
        let o = hikonv(&[
            "search", "--bit-a", a, "--bit-b", b, "--p", p, "--q", q, "--mode", "single",
        ]);
        assert_eq!(o.status.code(), Some(0));
        assert!(stdout(&o).contains(want), "{a}x{b} p={p}: {}", stdout(&o));
    }
}

#[test]
fn search_errors_exit_2() {
    let o = hikonv(&[
        "search", "--bit-a", "4", "--bit-b", "4", "--p", "8", "--q", "8", "--mode", "single",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    assert_eq!(
        hikonv(&["search", "--p", "4", "--q", "4", "--bogus"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(hikonv(&["search", "--p", "4"]).status.code(), Some(2));
}

#[test]
fn help_for_every_subcommand() {
    for sub in ["search", "table", "conv1d", "conv2d", "bench", "selftest"] {
        let o = hikonv(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("Usage"), "{sub}");
    }
}

#[test]
fn table_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.csv");
    let o = hikonv(&[
        "table",
        "--bit-a",
        "27",
        "--bit-b",
        "18",
        "--mode",
        "single",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "p,q,n,k,s,gb,ops");
    assert_eq!(lines.len(), 65);
    assert!(lines.contains(&"4,4,3,2,9,1,8"));

    let o = hikonv(&["table", "--p-max", "1", "--q-max", "1"]);
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn conv1d_paths_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f.qtsr");
    let g = dir.path().join("g.qtsr");
    write_file(&f, &QTensor::new(vec![3], 4, false, vec![1, 2, 3]).unwrap()).unwrap();
    write_file(&g, &QTensor::new(vec![2], 4, false, vec![1, 1]).unwrap()).unwrap();
    let packed = dir.path().join("packed.qtsr");
    let naive = dir.path().join("naive.qtsr");
    let base = ["--input", path_str(&f), "--kernel", path_str(&g)];
    let o = hikonv(
        &[
            &["conv1d"],
            &base[..],
            &["--out", path_str(&packed), "--verify"],
        ]
        .concat(),
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let o = hikonv(
        &[
            &["conv1d"],
            &base[..],
            &["--out", path_str(&naive), "--naive"],
        ]
        .concat(),
    );
    assert_eq!(o.status.code(), Some(0));
    let y = read_file(&packed).unwrap();
    assert_eq!(y.values(), &[1, 3, 5, 3]);
    assert_eq!(y.bitwidth(), 32);
    assert_eq!(
        std::fs::read(&packed).unwrap(),
        std::fs::read(&naive).unwrap()
    );
}

#[test]
fn conv2d_paths_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.qtsr");
    let w = dir.path().join("w.qtsr");
    let (ci, co, h, wd, k) = (4u32, 3u32, 6u32, 7u32, 3u32);
    let xs: Vec<i64> = (0..ci * h * wd).map(|i| (i as i64 * 5) % 16 - 8).collect();
    let ws: Vec<i64> = (0..co * ci * k * k)
        .map(|i| (i as i64 * 3) % 16 - 8)
        .collect();
    write_file(&x, &QTensor::new(vec![ci, h, wd], 4, true, xs).unwrap()).unwrap();
    write_file(&w, &QTensor::new(vec![co, ci, k, k], 4, true, ws).unwrap()).unwrap();
    let a = dir.path().join("a.qtsr");
    let b = dir.path().join("b.qtsr");
    let base = ["--input", path_str(&x), "--kernel", path_str(&w)];
    let o = hikonv(&[&["conv2d"], &base[..], &["--out", path_str(&a), "--verify"]].concat());
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let o = hikonv(
        &[
            &["conv2d"],
            &base[..],
            &["--out", path_str(&b), "--naive", "--m", "2"],
        ]
        .concat(),
    );
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(read_file(&a).unwrap().dims(), &[co, h - k + 1, wd - k + 1]);
}

#[test]
fn conv_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.qtsr");
    std::fs::write(&junk, b"NOPE\x01\x04\x00\x01").unwrap();
    let out = dir.path().join("o.qtsr");
    let o = hikonv(&[
        "conv1d",
        "--input",
        path_str(&junk),
        "--kernel",
        path_str(&junk),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());

    let f = dir.path().join("f.qtsr");
    let g = dir.path().join("g.qtsr");
    write_file(&f, &QTensor::new(vec![2], 4, true, vec![1, -2]).unwrap()).unwrap();
    write_file(&g, &QTensor::new(vec![2], 4, false, vec![1, 2]).unwrap()).unwrap();
    let o = hikonv(&[
        "conv1d",
        "--input",
        path_str(&f),
        "--kernel",
        path_str(&g),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn selftest_counts_and_determinism() {
    let o = hikonv(&[
        "selftest",
        "--exhaustive-bits",
        "2",
        "--random-cases",
        "200",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for line in text.lines().filter(|l| l.starts_with("exhaustive")) {
        let checked: u64 = line
            .split(": ")
            .nth(1)
            .unwrap()
            .split(' ')
            .next()
            .unwrap()
            .parse()
            .unwrap();
        assert!(checked >= 256, "{line}");
    }
    let a = hikonv(&["selftest", "--seed", "7", "--random-cases", "100"]);
    let b = hikonv(&[
        "selftest",
        "--seed",
        "7",
        "--random-cases",
        "100",
        "--threads",
        "3",
    ]);
    assert_eq!(a.status.code(), b.status.code());
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn bench_emits_one_row() {
    let o = hikonv(&[
        "bench",
        "--scenario",
        "conv1d",
        "--len",
        "4096",
        "--k",
        "3",
        "--p",
        "4",
        "--q",
        "4",
        "--iters",
        "3",
        "--warmup",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let rows = hikonv::bench::parse_csv(&text).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].naive_mults, 4096 * 3);
    assert_eq!(rows[0].hikonv_wide_mults, 4096u64.div_ceil(3));
}
