use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vulmatch::binmodel::{BinaryFunction, BlockId, FunctionBuilder, NormInsn};
use vulmatch::diffcore::{diff_lines, PatchSite, SiteKind};
use vulmatch::evalharness::{
    mismatch_from_scores, render_report, top1_score, CaseScores, CorpusBinary, EvalCase, ScoredFunction,
    UNMATCHED_MARK,
};
use vulmatch::matcher::{match_parents_children, score_signature, DEFAULT_PATCH_THRESHOLD};
use vulmatch::sigdb::{CveRecord, SignatureDatabase};
use vulmatch::siggen::{
    build_change_signature, find_add_batches, find_added_blocks, find_leading_blocks, generate_signatures,
    BlockList, PairContext, ParentsChildren, Signature, SignatureKind, Structure,
};
use vulmatch::synth::{figure_scenario, kind_for, synth_function, synth_pair, SynthPair};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

fn norm(texts: &[&str]) -> Vec<NormInsn> {
    texts.iter().map(|t| NormInsn::from_text(t).expect("instruction")).collect()
}

fn lines(texts: &[&str], line: u32) -> Vec<(String, u32)> {
    texts.iter().map(|t| (t.to_string(), line)).collect()
}

fn signatures_of(p: &SynthPair) -> Result<Vec<Signature>, String> {
    generate_signatures(&p.vulnerable, &p.patched, &p.old_src, &p.new_src, &p.source_file, &p.cve_id)
        .map(|g| g.signatures)
        .map_err(|e| format!("{}: {e}", p.cve_id))
}

fn formula_fidelity() -> Outcome {
    let start = Instant::now();

    let change = Signature::new(
        "CVE-0000-0001",
        "parse_header",
        SignatureKind::ChangeOneBlock,
        vec![Structure::BlockList(BlockList {
            blocks: vec![norm(&[
                "mov eax, dword ptr [rbp - 0x14]",
                "cmp eax, 0x40",
                "mov edx, dword ptr [rbp - 0x18]",
                "add edx, eax",
                "mov dword ptr [rbp - 0x18], edx",
            ])],
        })],
        None,
    );
    let q = FunctionBuilder::new("parse_header", "q", "q.c")
        .block(
            "a",
            &["b"],
            &lines(
                &[
                    "mov eax, dword ptr [rbp - 0x14]",
                    "cmp eax, 0x80",
                    "mov edx, dword ptr [rbp - 0x18]",
                    "mov dword ptr [rbp - 0x18], edx",
                ],
                0,
            ),
        )
        .block("b", &[], &lines(&["ret"], 0))
        .build()
        .map_err(|e| e.to_string())?;
    let r = score_signature(&change, &q, DEFAULT_PATCH_THRESHOLD);
    ensure!((r.matched, r.total) == (3, 5), "change block matched {}/{}", r.matched, r.total);
    ensure!((r.sim - 0.6).abs() <= 1e-12, "change block sim {}", r.sim);

    let add = Signature::new(
        "CVE-0000-0002",
        "copy_buf",
        SignatureKind::Add,
        vec![Structure::ParentsChildren(ParentsChildren {
            parent: norm(&["mov rdi, rbx", "mov rsi, r12", "mov rdx, r13", "call 0x401200"]),
            children: vec![
                norm(&["mov eax, 0", "pop rbx", "ret"]),
                norm(&["xor eax, eax", "add rsp, 8", "ret"]),
            ],
        })],
        None,
    );
    let q = FunctionBuilder::new("copy_buf", "q", "q.c")
        .block("p", &["c1", "c2"], &lines(&["mov rdi, rbx", "mov rsi, r12", "mov rdx, r13", "call 0x401400"], 0))
        .block("c1", &[], &lines(&["mov eax, 0", "pop rbx", "ret"], 0))
        .block("c2", &[], &lines(&["mov eax, 1", "ret"], 0))
        .build()
        .map_err(|e| e.to_string())?;
    let r = score_signature(&add, &q, DEFAULT_PATCH_THRESHOLD);
    ensure!((r.matched, r.total) == (8, 10), "add structure matched {}/{}", r.matched, r.total);
    ensure!((r.sim - 0.8).abs() <= 1e-12, "add structure sim {}", r.sim);

    let took = start.elapsed();
    ensure!(took < Duration::from_secs(1), "took {took:?}");
    Ok(format!("3/5 = {}, 8/10 = {}, {took:.2?}", 3.0 / 5.0, 8.0 / 10.0))
}

fn patch_override() -> Outcome {
    let mut checked = 0;
    let mut pairs = 0;
    let mut seed = 0u64;
    while pairs < 40 {
        let p = synth_pair(1000 + seed, kind_for(seed as usize));
        seed += 1;
        let mut counted = false;
        for sig in signatures_of(&p)?.iter().filter(|s| s.patch_signature.is_some()) {
            let on_patched = score_signature(sig, &p.patched, DEFAULT_PATCH_THRESHOLD);
            ensure!(
                on_patched.patched && on_patched.sim == 0.0,
                "{} {}: patched origin gave P={} sim={}",
                sig.cve_id,
                sig.kind,
                on_patched.patched,
                on_patched.sim
            );
            let on_vuln = score_signature(sig, &p.vulnerable, DEFAULT_PATCH_THRESHOLD);
            ensure!(!on_vuln.patched, "{} {}: vulnerable origin flagged patched", sig.cve_id, sig.kind);
            checked += 1;
            counted = true;
        }
        pairs += usize::from(counted);
        ensure!(seed < 400, "only {pairs} pairs carry a patch signature");
    }
    Ok(format!("{checked} signatures over {pairs} pairs, 0 failures"))
}

fn identity() -> Outcome {
    let start = Instant::now();
    let mut kinds = BTreeSet::new();
    let mut n = 0;
    for i in 0..48 {
        let p = synth_pair(2000 + i as u64, kind_for(i));
        for sig in signatures_of(&p)? {
            let r = score_signature(&sig, &p.vulnerable, DEFAULT_PATCH_THRESHOLD);
            ensure!(
                r.sim == 1.0 && !r.patched,
                "{} {}: sim {} ({}/{})",
                sig.cve_id,
                sig.kind,
                r.sim,
                r.matched,
                r.total
            );
            kinds.insert(sig.kind);
            n += 1;
        }
    }
    ensure!(kinds.len() == 4, "kinds covered: {kinds:?}");
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(10), "took {took:?}");
    Ok(format!("48 pairs, {n} signatures, 4 kinds, {took:.2?}"))
}

fn lcs_rec(a: &[NormInsn], b: &[NormInsn]) -> usize {
    match (a.split_first(), b.split_first()) {
        (Some((x, ra)), Some((y, rb))) => {
            if x == y {
                1 + lcs_rec(ra, rb)
            } else {
                lcs_rec(ra, b).max(lcs_rec(a, rb))
            }
        }
        _ => 0,
    }
}

fn best_assignment(children: &[Vec<NormInsn>], succs: &[Vec<NormInsn>], used: &mut [bool]) -> usize {
    let Some((child, rest)) = children.split_first() else {
        return 0;
    };
    let mut best = best_assignment(rest, succs, used);
    for j in 0..succs.len() {
        if !used[j] {
            used[j] = true;
            best = best.max(lcs_rec(child, &succs[j]) + best_assignment(rest, succs, used));
            used[j] = false;
        }
    }
    best
}

fn exhaustive_pc(pc: &ParentsChildren, q: &BinaryFunction) -> usize {
    q.blocks()
        .iter()
        .map(|p| {
            let succs: Vec<Vec<NormInsn>> = q
                .successors(&p.id)
                .into_iter()
                .map(|s| q.block(s).expect("successor").normalized())
                .collect();
            lcs_rec(&pc.parent, &p.normalized()) + best_assignment(&pc.children, &succs, &mut vec![false; succs.len()])
        })
        .max()
        .unwrap_or(0)
}

const ALPHABET: [&str; 5] = ["mov eax, ebx", "add eax, 1", "cmp eax, 0", "push rbx", "xor eax, eax"];

fn random_block(rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    (0..rng.gen_range(1..=5)).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())]).collect()
}

fn matcher_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..200 {
        let nb = rng.gen_range(1..=6);
        let names: Vec<String> = (0..nb).map(|i| format!("b{i}")).collect();
        let mut fb = FunctionBuilder::new("q", "q", "q.c");
        for name in &names {
            let succs: Vec<&str> = names.iter().filter(|_| rng.gen_bool(0.4)).map(String::as_str).collect();
            fb = fb.block(name, &succs, &lines(&random_block(&mut rng), 0));
        }
        let q = fb.build().map_err(|e| e.to_string())?;
        let pc = ParentsChildren {
            parent: norm(&random_block(&mut rng)),
            children: (0..rng.gen_range(1..=3)).map(|_| norm(&random_block(&mut rng))).collect(),
        };
        let got = match_parents_children(&pc, &q).matched;
        let want = exhaustive_pc(&pc, &q);
        ensure!(got == want, "case {case}: matcher {got}, exhaustive {want}");
    }
    Ok("200 random queries agree with exhaustive enumeration".into())
}

fn brute_lcs(a: &[&str], b: &[&str]) -> usize {
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let picked: Vec<&str> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            let mut it = b.iter();
            picked.iter().all(|x| it.any(|y| y == x)).then_some(picked.len())
        })
        .max()
        .unwrap_or(0)
}

fn random_lines(rng: &mut ChaCha8Rng, max: usize, alphabet: &[&'static str]) -> Vec<&'static str> {
    (0..rng.gen_range(0..=max)).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
}

fn diff_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let small = ["a", "b", "c"];
    for case in 0..500 {
        let old = random_lines(&mut rng, 8, &small);
        let new = random_lines(&mut rng, 8, &small);
        let cost = diff_lines(&old, &new).cost();
        let want = old.len() + new.len() - 2 * brute_lcs(&old, &new);
        ensure!(cost == want, "case {case}: {old:?} -> {new:?}: cost {cost}, brute force {want}");
    }
    let wide = ["x = 1;", "y = 2;", "}", "return x;", "if (n > 0) {", "free(p);", ""];
    for case in 0..1000 {
        let old = random_lines(&mut rng, 50, &wide);
        let new = random_lines(&mut rng, 50, &wide);
        let script = diff_lines(&old, &new);
        ensure!(
            script.old_len() == old.len() && script.apply(&old, &new) == new,
            "round trip {case} failed"
        );
    }
    Ok("500 edit costs minimal, 1000 round trips exact".into())
}

fn ids(xs: &[&str]) -> BTreeSet<BlockId> {
    xs.iter().map(|x| BlockId::from(*x)).collect()
}

fn batch_geometry() -> Outcome {
    let sc = figure_scenario();
    let (_, sites) = sc.sites();
    let found = find_added_blocks(&sc.patched, &sites, &sc.source_file).map_err(|e| e.to_string())?;
    let batches = find_add_batches(&sc.patched, &found.added);
    let got: Vec<BTreeSet<BlockId>> = batches.iter().map(|b| b.block_ids.clone()).collect();
    ensure!(got == vec![ids(&["4", "5", "6"]), ids(&["9", "10"])], "batches {got:?}");
    let leading: Vec<Vec<BlockId>> = batches
        .iter()
        .map(|b| find_leading_blocks(&sc.patched, b))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure!(
        leading == vec![vec![BlockId::from("1")], vec![BlockId::from("7")]],
        "leading blocks {leading:?}"
    );
    Ok("batches {4,5,6} {9,10}, leading {1} {7}".into())
}

fn scores(s_gv: f64, others: &[f64]) -> CaseScores {
    CaseScores {
        case_id: "c".into(),
        cve_id: "CVE-0000-0000".into(),
        s_gv,
        others: others
            .iter()
            .enumerate()
            .map(|(i, &score)| ScoredFunction {
                binary: "b".into(),
                function: format!("f{i}"),
                score,
            })
            .collect(),
    }
}

fn metrics() -> Outcome {
    let mut db = SignatureDatabase::new();
    let mut cases = Vec::new();
    for i in 0..10 {
        let p = synth_pair(3000 + i as u64, kind_for(i));
        let name = p.vulnerable.name.clone();
        db.upsert_record(CveRecord::single(&p.cve_id, "synth", &p.source_file, &name, "1.0"));
        db.add_signatures(signatures_of(&p)?).map_err(|e| e.to_string())?;
        let mut release = vec![p.vulnerable.renamed(name.clone(), "release-1.0")];
        release.extend((0..4).map(|k| synth_function(i as u64 * 10 + k, &format!("helper_{k}"), "release-1.0")));
        let mut corpus = vec![
            CorpusBinary {
                label: "release-1.0".into(),
                functions: release,
            },
            CorpusBinary {
                label: "release-1.1".into(),
                functions: vec![p.patched.renamed(name.clone(), "release-1.1")],
            },
        ];
        if i % 5 == 4 {
            corpus.push(CorpusBinary {
                label: "vendored".into(),
                functions: vec![p.vulnerable.renamed("vendored_copy", "vendored")],
            });
        }
        cases.push(EvalCase {
            id: format!("case-{i}"),
            cve_id: p.cve_id.clone(),
            ground_truth_function: name,
            corpus,
            expected_vulnerable_binary: "release-1.0".into(),
        });
    }
    let top1 = top1_score(&cases, &db, DEFAULT_PATCH_THRESHOLD).map_err(|e| e.to_string())?;
    ensure!(top1 == 0.8, "top-1 {top1} on the 10-case fixture");

    let grid = [
        scores(0.9, &[0.85]),
        scores(0.9, &[0.75]),
        scores(0.55, &[0.54]),
        scores(0.6, &[0.55]),
    ];
    let flags: Vec<bool> = grid.iter().map(|c| c.is_mismatch(0.1)).collect();
    ensure!(flags == [true, false, false, true], "alpha/low-score rules gave {flags:?}");
    ensure!(mismatch_from_scores(&grid, 0.1) == 0.5, "grid mismatch {}", mismatch_from_scores(&grid, 0.1));
    ensure!(mismatch_from_scores(&grid, 0.2) == 0.75, "grid mismatch at 0.2");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for g in 0..100 {
        let cases: Vec<CaseScores> = (0..rng.gen_range(1..20))
            .map(|_| {
                let others: Vec<f64> = (0..rng.gen_range(0..6)).map(|_| rng.gen::<f64>()).collect();
                scores(rng.gen(), &others)
            })
            .collect();
        let m: Vec<f64> = [0.1, 0.2, 0.3, 0.4].iter().map(|&a| mismatch_from_scores(&cases, a)).collect();
        ensure!(m.windows(2).all(|w| w[0] <= w[1]), "grid {g} not monotone: {m:?}");
    }
    Ok("top-1 0.8, alpha and S_GV<0.6 rules hold, monotone on 100 grids".into())
}

fn report_fixture(rip_a: &str, rip_b: &str, binary: &str) -> Result<BinaryFunction, String> {
    let first = format!("mov rcx, qword ptr [rip + {rip_a}]");
    let second = format!("mov rcx, qword ptr [rip + {rip_b}]");
    let mid: Vec<(String, u32)> = vec![
        (first, 22),
        ("mov edx, dword ptr [rbp - 0x2c]".into(), 22),
        (second, 22),
        ("lea rsi, [rip + 0x1f2a]".into(), 22),
        ("call 0x4011d0".into(), 22),
    ];
    FunctionBuilder::new("imagetopnm", binary, "src/bin/convert.c")
        .block(
            "1",
            &["2"],
            &lines(&["push rbp", "mov rbp, rsp", "sub rsp, 0x48", "mov qword ptr [rbp - 0x38], rdi"], 18),
        )
        .block(
            "2",
            &["3", "5"],
            &lines(
                &[
                    "mov rax, qword ptr [rbp - 0x38]",
                    "mov eax, dword ptr [rax + 0x10]",
                    "mov dword ptr [rbp - 0x2c], eax",
                    "mov rdi, qword ptr [rbp - 0x40]",
                    "cmp eax, 3",
                    "jb 0x401070",
                ],
                20,
            ),
        )
        .block("3", &["4"], &mid)
        .block(
            "4",
            &["5"],
            &lines(
                &[
                    "mov rax, qword ptr [rbp - 0x38]",
                    "mov rax, qword ptr [rax + 0x18]",
                    "mov ecx, dword ptr [rbp - 0x2c]",
                    "imul ecx, dword ptr [rax + 0x8]",
                    "mov dword ptr [rbp - 0x30], ecx",
                    "cmp ecx, 0",
                    "jle 0x401070",
                ],
                23,
            ),
        )
        .block("5", &[], &lines(&["add rsp, 0x48", "pop rbp", "ret"], 30))
        .build()
        .map_err(|e| e.to_string())
}

fn report() -> Outcome {
    let vulnerable = report_fixture("0xfc246", "0xfc22b", "openjpeg-2.1.2")?;
    let site = PatchSite {
        kind: SiteKind::Change,
        old_lines: [20, 22, 23]
            .iter()
            .map(|&line| vulmatch::diffcore::NumberedLine {
                line,
                text: String::new(),
            })
            .collect(),
        new_lines: vec![],
    };
    let ctx = PairContext {
        vulnerable: &vulnerable,
        patched: &vulnerable,
        source_file: "src/bin/convert.c".into(),
        correspondence: Default::default(),
    };
    let sig = build_change_signature(&ctx, &[site], "CVE-0000-0003").map_err(|e| e.to_string())?;
    ensure!(sig.kind == SignatureKind::ChangeManyBlock, "kind {}", sig.kind);
    ensure!(sig.total_instructions == 23, "signature has {} instructions", sig.total_instructions);

    let query = report_fixture("0xfc236", "0xfc21b", "openjpeg-2.1.1")?;
    let r = vulmatch::matcher::Matcher::new([&sig], DEFAULT_PATCH_THRESHOLD);
    let result = r.score(0, &r.prepare(&query), true);
    ensure!((result.matched, result.total) == (19, 23), "matched {}/{}", result.matched, result.total);
    let targets: Vec<Vec<Option<BlockId>>> = result.structure_matches.iter().map(|s| s.targets.clone()).collect();
    let want = |a: &str, b: &str| vec![Some(BlockId::from(a)), Some(BlockId::from(b))];
    ensure!(targets == vec![want("2", "3"), want("3", "4")], "aligned to {targets:?}");
    let text = render_report(&result, &sig).text;
    let footer = text.lines().last().unwrap_or_default();
    ensure!(footer.contains("19/23"), "footer {footer:?}");
    let unmatched = text.lines().filter(|l| l.ends_with(UNMATCHED_MARK)).count();
    ensure!(unmatched == 4, "{unmatched} unmatched rows\n{text}");
    Ok(format!("footer {footer:?}, 4 unmatched rows"))
}

fn run_match(bin: &str, db: &Path, query: &Path, out: &Path, serial: bool) -> Result<Vec<u8>, String> {
    let mut cmd = Command::new(bin);
    cmd.arg("match").arg("--db").arg(db).arg("--query").arg(query).arg("--out").arg(out);
    if serial {
        cmd.arg("--serial");
    }
    let status = cmd.status().map_err(|e| e.to_string())?;
    ensure!(status.success(), "match exited with {status}");
    std::fs::read(out).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let qdir = dir.path().join("corpus");
    std::fs::create_dir(&qdir).map_err(|e| e.to_string())?;
    let mut db = SignatureDatabase::new();
    let mut n_funcs = 0;
    let mut write = |f: &BinaryFunction| -> Result<(), String> {
        let path = qdir.join(format!("{n_funcs:04}_{}.json", f.name));
        n_funcs += 1;
        std::fs::write(path, f.to_json()).map_err(|e| e.to_string())
    };
    for i in 0..100 {
        let p = synth_pair(5000 + i as u64, kind_for(i));
        db.upsert_record(CveRecord::single(&p.cve_id, "synth", &p.source_file, &p.vulnerable.name, "1.0"));
        db.add_signatures(signatures_of(&p)?).map_err(|e| e.to_string())?;
        write(&p.vulnerable.renamed(p.vulnerable.name.clone(), "app-1.0"))?;
        write(&p.patched.renamed(p.patched.name.clone(), "app-1.1"))?;
    }
    for i in 0..800u64 {
        write(&synth_function(9000 + i, &format!("sub_{i:x}"), "firmware"))?;
    }
    ensure!(n_funcs == 1000, "{n_funcs} functions");
    let n_sigs = db.signatures.len();
    ensure!(n_sigs == 100, "{n_sigs} signatures");
    let db_path = dir.path().join("db.json");
    db.save(&db_path).map_err(|e| e.to_string())?;

    let bin = env!("CARGO_BIN_EXE_vulmatch");
    let start = Instant::now();
    let first = run_match(bin, &db_path, &qdir, &dir.path().join("a.json"), false)?;
    let took = start.elapsed();
    let second = run_match(bin, &db_path, &qdir, &dir.path().join("b.json"), false)?;
    let serial = run_match(bin, &db_path, &qdir, &dir.path().join("c.json"), true)?;
    ensure!(took < Duration::from_secs(60), "parallel match took {took:?}");
    ensure!(first == second, "two parallel runs differ");
    ensure!(first == serial, "serial and parallel runs differ");
    Ok(format!("1000 functions x 100 signatures in {took:.2?}, outputs byte-identical"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("formula fidelity", formula_fidelity),
        ("patch override", patch_override),
        ("identity", identity),
        ("matcher oracle", matcher_oracle),
        ("diff oracle", diff_oracle),
        ("batch geometry", batch_geometry),
        ("metrics", metrics),
        ("report", report),
        ("determinism and performance", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
