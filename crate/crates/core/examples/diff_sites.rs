use vulmatch::diffcore::{diff_lines, diff_sources, split_lines, LineCorrespondence, SitesDocument};
use vulmatch::synth::motivating_scenario;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let sc = motivating_scenario();
    let (script, sites) = diff_sources(&sc.old_src, &sc.new_src);
    println!("edit cost {}", script.cost());
    for s in &sites {
        println!("{:?}: {} old line(s), {} new line(s)", s.kind, s.old_lines.len(), s.new_lines.len());
    }

    let corr = LineCorrespondence::from_script(&script);
    println!("new line 13 was old line {:?}", corr.to_old(13));

    // the script rebuilds the new text from the old one
    let old = split_lines(&sc.old_src);
    let new = split_lines(&sc.new_src);
    assert_eq!(diff_lines(&old, &new).apply(&old, &new), new);

    println!("{}", serde_json::to_string_pretty(&SitesDocument { sites })?);
    Ok(())
}

fn main() {
    run_example().unwrap();
}
