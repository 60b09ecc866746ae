import { ChatApi } from "./api.js";
import { ChatView } from "./view.js";

function apiBase(): string {
  const param = new URLSearchParams(window.location.search).get("api");
  if (param) return param;
  // Served by `nanoglm serve --static-dir`, the API shares our origin.
  return window.location.origin;
}

const root = document.getElementById("app");
if (!root) throw new Error("missing #app element");
const view = new ChatView(root, new ChatApi(apiBase()));
void view.start();
