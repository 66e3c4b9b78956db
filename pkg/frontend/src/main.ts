import { ApiClient } from "./api.js";
import { OperatorConsole } from "./console.js";

async function boot(): Promise<void> {
  const app = document.getElementById("app");
  if (!app) return;
  const params = new URLSearchParams(window.location.search);
  const baseUrl = params.get("api") ?? window.location.origin;
  const client = new ApiClient(baseUrl, fetch.bind(globalThis));
  try {
    const schema = await client.schema();
    new OperatorConsole(schema, { baseUrl }).mount(app);
  } catch (err) {
    app.textContent = `service unreachable at ${baseUrl}: ${err}`;
  }
}

void boot();
