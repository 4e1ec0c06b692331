import { defineConfig } from "vite";

export default defineConfig({
  base: "./",
  build: { outDir: "dist", sourcemap: false },
  test: { environment: "node", include: ["tests/**/*.test.ts"] },
});
