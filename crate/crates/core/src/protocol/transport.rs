use super::client::ClientState;
use super::messages::{Endpoint, Envelope, Message};
use crate::error::{Error, Result};

/// Synchronous in-process delivery. Clients are only reachable through
/// [`InProcessTransport::exchange`]; the trace hook sees every message in
/// both directions.
pub struct InProcessTransport {
    clients: Vec<ClientState>,
}

impl InProcessTransport {
    pub fn new(clients: Vec<ClientState>) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::Config("transport needs at least one client".into()));
        }
        if let Some((i, c)) = clients.iter().enumerate().find(|(i, c)| c.id() != *i) {
            return Err(Error::Config(format!("client at slot {i} has id {}", c.id())));
        }
        Ok(InProcessTransport { clients })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn clients_mut(&mut self) -> &mut [ClientState] {
        &mut self.clients
    }

    pub fn into_clients(self) -> Vec<ClientState> {
        self.clients
    }

    /// Delivers each `(client, message)` request and returns the replies
    /// in request order.
    pub fn exchange(
        &mut self,
        iteration: usize,
        requests: Vec<(usize, Message)>,
        trace: &mut dyn FnMut(&Envelope<'_>),
    ) -> Result<Vec<Message>> {
        let mut replies = Vec::with_capacity(requests.len());
        for (to, msg) in requests {
            let client = self
                .clients
                .get_mut(to)
                .ok_or_else(|| Error::Protocol(format!("no client {to}")))?;
            trace(&Envelope {
                iteration,
                from: Endpoint::Server,
                to: Endpoint::Client(to),
                message: &msg,
            });
            let reply = client.handle(&msg)?;
            trace(&Envelope {
                iteration,
                from: Endpoint::Client(to),
                to: Endpoint::Server,
                message: &reply,
            });
            replies.push(reply);
        }
        Ok(replies)
    }
}
