import { ApiClient } from "./api.js";
import { ConsoleApp } from "./ui.js";

const params = new URLSearchParams(window.location.search);
const base = params.get("service") ?? "http://127.0.0.1:8440";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app mount point");

const app = new ConsoleApp(root, new ApiClient(base));
void app.boot();
