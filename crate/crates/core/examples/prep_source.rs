// Tag the functions we want signatures for so the compiler keeps them
// out of line.

use vulmatch::source_prep::{locate_function_definitions, prepare_source};

const SOURCE: &str = r#"#include "tftp.h"

static CURLcode tftp_connect(struct connectdata *conn,
                             bool *done)
{
  /* tftp_connect(conn) is not a definition */
  return tftp_state_machine(conn, TFTP_EVENT_INIT);
}

int tftp_done(struct connectdata *conn) { return 0; }
"#;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let spans = locate_function_definitions(SOURCE, &["tftp_connect", "tftp_done"])?;
    for s in &spans {
        println!("{} header at line {}, name at line {}", s.name, s.signature_line, s.start_line);
    }
    let tagged = prepare_source(SOURCE, &["tftp_connect", "tftp_done"])?;
    print!("{}", tagged.text);

    // a second pass leaves the text alone
    let again = prepare_source(&tagged.text, &["tftp_connect", "tftp_done"])?;
    assert_eq!(again.text, tagged.text);
    assert_eq!(again.already_tagged.len(), 2);
    Ok(())
}

fn main() {
    run_example().unwrap();
}
