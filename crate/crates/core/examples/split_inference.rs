//! Split inference with a curious server: the client runs layer 0 locally,
//! the server finishes the pass and runs HEI on what it receives.

mod common;

use eplab::attacks::Method;
use eplab::defense::build_overlap_set;
use eplab::splitsvc::wire::FloatWidth;
use eplab::splitsvc::{client_session, local_result, ClientDefense, ClientOptions, ServerConfig, SplitServer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = common::small_lm(2);
    let k = 0;
    let cfg = ServerConfig { split_layer: k, attack: Some(Method::Hei), ..Default::default() };
    let server = SplitServer::bind("127.0.0.1:0", fx.lm.clone(), fx.vocab.clone(), None, cfg)?.spawn();
    let prefix = fx.lm.prefix(k)?;
    let texts: Vec<String> = fx.test.iter().take(3).map(|s| fx.vocab.decode(&s.ids).unwrap()).collect();

    let exact = ClientOptions { wire: FloatWidth::F64, ..Default::default() };
    for t in &texts {
        let out = client_session(&prefix, &fx.vocab, t, server.addr(), &exact)?;
        let local = local_result(&fx.lm, &fx.vocab, &fx.vocab.encode(t))?;
        println!("sent {t:?}\n  server output matches local: {}", out == local);
    }

    let set = build_overlap_set(fx.lm.hidden_dim(), 4, 5)?;
    let defended = ClientOptions { defense: Some(ClientDefense { set, choice_seed: 1 }), ..Default::default() };
    for t in &texts {
        client_session(&prefix, &fx.vocab, t, server.addr(), &defended)?;
    }

    println!("\nwhat the server recovered:");
    for e in server.attack_log() {
        println!("  session {} {}: {}", e.session, e.method, e.reconstruction);
    }
    server.shutdown();
    Ok(())
}
