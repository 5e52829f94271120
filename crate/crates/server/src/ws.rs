//! Persistent bidirectional channel: one JSON message per WebSocket text
//! frame in each direction.

use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, Query, State};
use axum::response::Response;
use futures::{SinkExt, StreamExt};
use kpr_core::session::{ClientMessage, Role, ServerBody, ServerMessage};

use crate::{now_ms, slot, ApiError, AppState, SessionSlot, TokenQuery};

pub(crate) async fn upgrade(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<TokenQuery>,
    upgrade: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let slot = slot(&state, &id).await?;
    let role = {
        let session = slot.lock().await;
        session
            .authorize(&q.token)
            .map_err(|e| ApiError::from_session(&session, e))?
    };
    Ok(upgrade.on_upgrade(move |socket| connection(socket, slot, role, q.after)))
}

async fn reply(slot: &SessionSlot, role: Role, text: &str) -> ServerMessage {
    let mut session = slot.lock().await;
    let message = match serde_json::from_str::<ClientMessage>(text) {
        Ok(message) => message,
        Err(e) => {
            let mut out = session.state_message(role);
            out.body = ServerBody::Error {
                code: "bad_request".into(),
                message: e.to_string(),
            };
            return out;
        }
    };
    let result = session.handle(&message, now_ms());
    slot.publish(&session);
    result.unwrap_or_else(|e| session.error_message(&e))
}

async fn connection(socket: WebSocket, slot: Arc<SessionSlot>, role: Role, after: Option<u64>) {
    let (mut tx, mut rx) = socket.split();
    let mut changed = slot.subscribe();
    let mut last_seq = after;

    loop {
        let pending = {
            let session = slot.lock().await;
            let out = if last_seq == Some(session.seq()) {
                Vec::new()
            } else {
                session.messages_since(role, last_seq)
            };
            last_seq = Some(session.seq());
            out
        };
        for message in pending {
            if tx
                .send(Message::Text(message.to_line().into()))
                .await
                .is_err()
            {
                return;
            }
        }
        tokio::select! {
            incoming = rx.next() => match incoming {
                Some(Ok(Message::Text(text))) => {
                    let out = reply(&slot, role, text.as_str()).await;
                    if tx.send(Message::Text(out.to_line().into())).await.is_err() {
                        return;
                    }
                }
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => return,
                Some(Ok(_)) => {}
            },
            result = changed.changed() => {
                if result.is_err() {
                    return;
                }
            }
        }
    }
}
