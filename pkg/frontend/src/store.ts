/** Conversation state for one chat session.
 *
 * The store enforces the service's one-turn-at-a-time contract client-side
 * (send is a no-op while a turn is pending), keeps the typed draft intact
 * whenever a send fails, and can rebuild the whole transcript from the
 * service so a page reload loses nothing. The only conversation state it
 * would ever make sense to persist locally is the session id.
 */

import { ApiClient, ChatReply, Profile, ServiceError, TranscriptTurn } from "./api.js";

export interface SourceRef {
  passageId: string;
  docId?: string;
  snippet?: string;
  score?: number;
}

export interface TurnView {
  userText: string;
  kind: "answer" | "clarification";
  text: string;
  /** Only ever populated from the service's citation list. */
  sources: SourceRef[];
  grounded: boolean;
}

export interface ChatError {
  code: string;
  message: string;
}

export type Listener = () => void;

const DEFAULT_PROFILE: Profile = "resident";

function turnFromReply(userText: string, reply: ChatReply): TurnView {
  return {
    userText,
    kind: reply.kind,
    text: reply.text,
    sources: reply.citations.map((citation) => ({
      passageId: citation.passage_id,
      docId: citation.doc_id,
      snippet: citation.snippet,
      score: citation.score,
    })),
    grounded: reply.grounded,
  };
}

function turnFromTranscript(turn: TranscriptTurn): TurnView {
  return {
    userText: turn.user_text,
    kind: turn.response.kind,
    text: turn.response.text,
    sources: turn.response.citations.map((passageId) => ({ passageId })),
    grounded: turn.response.constraint_flags["grounded"] === true,
  };
}

export class ChatStore {
  sessionId: string | null = null;
  profile: Profile = DEFAULT_PROFILE;
  turns: TurnView[] = [];
  draft = "";
  pending = false;
  lastError: ChatError | null = null;

  private readonly listeners = new Set<Listener>();

  constructor(private readonly api: ApiClient) {}

  subscribe(listener: Listener): () => void {
    this.listeners.add(listener);
    return () => this.listeners.delete(listener);
  }

  setDraft(text: string): void {
    this.draft = text;
    this.notify();
  }

  setProfile(profile: Profile): void {
    this.profile = profile;
    this.notify();
  }

  /** Send the current draft as one turn. No-op while a turn is in flight
   * or when the draft is blank. On failure the draft stays as typed. */
  async send(): Promise<void> {
    const text = this.draft;
    if (this.pending || text.trim() === "") {
      return;
    }
    this.pending = true;
    this.lastError = null;
    this.notify();
    try {
      const reply = await this.api.chat({
        text,
        session_id: this.sessionId ?? undefined,
        profile: this.profile,
      });
      this.sessionId = reply.session_id;
      this.turns.push(turnFromReply(text, reply));
      this.draft = "";
    } catch (error) {
      this.lastError =
        error instanceof ServiceError
          ? { code: error.code, message: error.message }
          : { code: "network_error", message: String(error) };
    } finally {
      this.pending = false;
      this.notify();
    }
  }

  /** Rebuild the transcript for an existing session from the service. */
  async restore(sessionId: string): Promise<void> {
    const transcript = await this.api.session(sessionId);
    this.sessionId = transcript.session_id;
    if (transcript.profile) {
      this.profile = transcript.profile as Profile;
    }
    this.turns = transcript.turns.map(turnFromTranscript);
    this.lastError = null;
    this.notify();
  }

  private notify(): void {
    for (const listener of this.listeners) {
      listener();
    }
  }
}
