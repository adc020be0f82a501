//! `--help` output is pinned; set `UPDATE_SNAPSHOTS=1` to rewrite the files.

use std::path::PathBuf;

use nmtkit_cli::{help_text, TOOLS};

fn check(name: &str, text: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots").join(format!("{name}.txt"));
    if std::env::var_os("UPDATE_SNAPSHOTS").is_some() {
        std::fs::write(&path, text).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(text, expected, "help of {name} changed; rerun with UPDATE_SNAPSHOTS=1 if intended");
}

#[test]
fn top_level_help() {
    check("nmt", &help_text(None));
}

#[test]
fn tool_help() {
    for t in TOOLS {
        check(&format!("nmt-{t}"), &help_text(Some(t)));
    }
}

#[test]
fn help_lists_every_flag() {
    let expected: &[(&str, &[&str])] = &[
        ("train", &["--config", "--resume"]),
        ("translate", &["-m", "-S", "-R", "-o", "-M", "-b", "-N", "-e", "-j", "--max-len", "-f"]),
        ("rescore", &["-m", "-S", "-n", "-o", "-b"]),
        ("build-dict", &["-n", "-s", "-o"]),
        ("extract", &["-m", "-p", "-o", "-l"]),
        ("test-lm", &["-m", "-b"]),
        ("bpe-learn", &["-s", "-i", "-o"]),
        ("bpe-apply", &["-c", "-i", "-o"]),
    ];
    for (tool, flags) in expected {
        let help = help_text(Some(tool));
        for f in *flags {
            assert!(help.contains(&format!("{f} ")) || help.contains(&format!("{f},")), "{tool} help lacks {f}");
        }
    }
}
