use vulmatch::binmodel::FunctionBuilder;
use vulmatch::evalharness::render_report;
use vulmatch::matcher::{score_signature, DEFAULT_PATCH_THRESHOLD};
use vulmatch::siggen::generate_signatures;
use vulmatch::synth::motivating_scenario;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let sc = motivating_scenario();
    let g = generate_signatures(&sc.vulnerable, &sc.patched, &sc.old_src, &sc.new_src, &sc.source_file, "CVE-2019-5482")?;
    let add = &g.signatures[0];

    // Same code built elsewhere: stack offsets moved, so some rows differ.
    let mut b = FunctionBuilder::new("tftp_connect", "vendor-fw-2.1", "tftp.c").base(0x8000);
    for blk in sc.vulnerable.blocks() {
        let succ: Vec<&str> = blk.successors.iter().map(|s| s.as_str()).collect();
        let insns: Vec<(String, u32)> = blk
            .instructions
            .iter()
            .map(|i| (i.raw_text.replace("rbp - 0x14", "rbp - 0x24"), 0))
            .collect();
        b = b.block(blk.id.as_str(), &succ, &insns);
    }
    let query = b.build()?;

    let result = score_signature(add, &query, DEFAULT_PATCH_THRESHOLD);
    let report = render_report(&result, add);
    print!("{}", report.text);

    let patched = score_signature(add, &sc.patched, DEFAULT_PATCH_THRESHOLD);
    print!("\n{}", render_report(&patched, add).text);
    Ok(())
}

fn main() {
    run_example().unwrap();
}
