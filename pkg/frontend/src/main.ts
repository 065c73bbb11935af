/** DOM wiring: the only module that touches the document. */

import { ApiClient, Profile } from "./api.js";
import { ChatStore } from "./store.js";
import { renderError, renderTranscript } from "./view.js";

const PROFILES: Profile[] = ["engineer", "planner", "maintenance", "resident"];

function requireElement<T extends HTMLElement>(id: string): T {
  const element = document.getElementById(id);
  if (!element) {
    throw new Error(`missing element #${id}`);
  }
  return element as T;
}

export function mount(baseUrl: string): ChatStore {
  const api = new ApiClient({ baseUrl });
  const store = new ChatStore(api);

  const transcript = requireElement<HTMLDivElement>("transcript");
  const errorBox = requireElement<HTMLDivElement>("error");
  const input = requireElement<HTMLTextAreaElement>("input");
  const sendButton = requireElement<HTMLButtonElement>("send");
  const profileSelect = requireElement<HTMLSelectElement>("profile");
  const restoreInput = requireElement<HTMLInputElement>("session-id");
  const restoreButton = requireElement<HTMLButtonElement>("restore");

  for (const profile of PROFILES) {
    const option = document.createElement("option");
    option.value = profile;
    option.textContent = profile;
    option.selected = profile === store.profile;
    profileSelect.appendChild(option);
  }

  store.subscribe(() => {
    transcript.innerHTML = renderTranscript(store.turns);
    errorBox.innerHTML = renderError(store.lastError);
    sendButton.disabled = store.pending;
    if (input.value !== store.draft) {
      input.value = store.draft;
    }
    if (store.sessionId) {
      restoreInput.value = store.sessionId;
    }
    transcript.scrollTop = transcript.scrollHeight;
  });

  input.addEventListener("input", () => store.setDraft(input.value));
  profileSelect.addEventListener("change", () =>
    store.setProfile(profileSelect.value as Profile),
  );
  sendButton.addEventListener("click", () => void store.send());
  input.addEventListener("keydown", (event) => {
    if (event.key === "Enter" && !event.shiftKey) {
      event.preventDefault();
      void store.send();
    }
  });
  restoreButton.addEventListener("click", () => {
    const sessionId = restoreInput.value.trim();
    if (sessionId) {
      void store.restore(sessionId);
    }
  });

  return store;
}

declare global {
  interface Window {
    GSI_SERVICE_URL?: string;
  }
}

if (typeof document !== "undefined" && document.getElementById("transcript")) {
  mount(window.GSI_SERVICE_URL ?? "http://127.0.0.1:8000");
}
